"""Behavioural simulator of a time-wavelength interleaved photonic CNN."""

__version__ = "0.1.0"
