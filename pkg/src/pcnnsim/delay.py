"""Per-wavelength delays that align the N**2 weighted copies of the image.

Channel (i, j) must lag by ((N - i) M + (N - j)) / BR.  The delays can be
realised by one dispersive medium fed with a programmed comb whose lines obey
the in-group spacing d_lambda and group spacing M * d_lambda.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .waveform import WdmFrame

__all__ = [
    "GeometryError",
    "DelayPlan",
    "PmwsGrid",
    "DispersionMedium",
    "required_delays",
    "arrayed_delays",
    "pmws_grid",
    "dispersion_delays",
    "resource_requirements",
    "apply_delays",
    "verify_delay_feasibility",
]

PS_PER_S = 1e12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DelayPlan:
    """N x N grid of channel delays [s]; ``error`` holds per-channel deviations."""

    delays: NDArray[np.float64]
    error: NDArray[np.float64] = field(default=None)
    rounding_error: NDArray[np.float64] = field(default=None)

    def __post_init__(self) -> None:
        d = np.array(self.delays, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise GeometryError("delay plan must be square")
        for name in ("error", "rounding_error"):
            val = getattr(self, name)
            arr = np.zeros_like(d) if val is None else np.array(val, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        d.setflags(write=False)
        object.__setattr__(self, "delays", d)

    @property
    def n_size(self) -> int:
        return self.delays.shape[0]

    @property
    def realized(self) -> NDArray[np.float64]:
        return self.delays + self.error

    def __getitem__(self, ij: tuple[int, int]) -> float:
        """Delay of channel (i, j), 1-based."""
        i, j = ij
        return float(self.delays[i - 1, j - 1])

    def records(self) -> list[dict]:
        n = self.n_size
        real = self.realized
        return [
            {"i": i + 1, "j": j + 1, "delay_s": float(self.delays[i, j]),
             "realized_delay_s": float(real[i, j]),
             "rounding_error_s": float(self.rounding_error[i, j])}
            for i in range(n) for j in range(n)
        ]

    def to_json(self) -> str:
        return json.dumps(self.records(), indent=1)


@dataclass(frozen=True)
class PmwsGrid:
    wavelengths: NDArray[np.float64]  # nm, indexed [i-1, j-1]
    delta_lambda: float
    base: float
    m_size: int


@dataclass(frozen=True)
class DispersionMedium:
    dispersion: float  # ps/nm/km
    length: float  # km

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise ValueError("length must be positive")
        if self.dispersion == 0:
            raise ValueError("dispersion must be non-zero")


def _check_geometry(m_size: int, n_size: int) -> None:
    if n_size < 1:
        raise GeometryError("kernel size must be >= 1")
    if n_size >= m_size:
        raise GeometryError(f"kernel {n_size} must be smaller than image {m_size}")


def _slot_index(m_size: int, n_size: int) -> NDArray[np.int64]:
    i, j = np.meshgrid(np.arange(n_size), np.arange(n_size), indexing="ij")
    return i * m_size + j


def required_delays(m_size: int, n_size: int, baud: float) -> DelayPlan:
    _check_geometry(m_size, n_size)
    if not baud > 0:
        raise ValueError("baud must be positive")
    idx = _slot_index(m_size, n_size)
    return DelayPlan((idx.max() - idx) / baud)


def arrayed_delays(
    m_size: int, n_size: int, baud: float, error_std: float, rng: np.random.Generator
) -> DelayPlan:
    """Per-channel fibre delays with independent Gaussian length errors [s]."""
    plan = required_delays(m_size, n_size, baud)
    err = rng.normal(0.0, error_std, plan.delays.shape)
    # keep realised delays physical
    err = np.maximum(err, -plan.delays)
    return DelayPlan(plan.delays, error=err)


def pmws_grid(m_size: int, n_size: int, delta_lambda: float, base: float = 1550.0) -> PmwsGrid:
    if not delta_lambda > 0:
        raise ValueError("delta_lambda must be positive")
    idx = np.arange(n_size)
    grid = base + (idx[:, None] * m_size + idx[None, :]) * delta_lambda
    return PmwsGrid(grid, float(delta_lambda), float(base), m_size)


def dispersion_delays(grid: PmwsGrid, medium: DispersionMedium) -> DelayPlan:
    """Group-delay differences TDD = (lambda_ij - lambda_11) L D, re-anchored.

    With normal ordering (D < 0) the longest wavelength arrives first, so
    channel (N, N) gets zero delay after subtracting the minimum.  For D > 0
    the wavelength-to-channel assignment is reversed.
    """
    tdd = (grid.wavelengths - grid.wavelengths[0, 0]) * medium.length * medium.dispersion
    tdd = tdd / PS_PER_S
    if medium.dispersion > 0:
        tdd = tdd[::-1, ::-1]
    return DelayPlan(tdd - tdd.min())


def resource_requirements(
    m_size: int, n_size: int, delta_lambda: float, dispersion: float, baud: float
) -> dict[str, float]:
    """Comb bandwidth [nm], line count and fibre length [km] for the dispersive TDU."""
    bandwidth = (m_size + 1) * (n_size - 1) * delta_lambda
    lines = bandwidth / delta_lambda + 1
    length = 1.0 / (baud * abs(dispersion) / PS_PER_S * delta_lambda)
    return {"bandwidth_nm": bandwidth, "lines": int(round(lines)), "length_km": length}


def apply_delays(frame: WdmFrame, plan: DelayPlan) -> tuple[WdmFrame, DelayPlan]:
    """Shift each channel right by its realised delay in whole samples.

    Returns the delayed frame and the plan with per-channel rounding error
    (realised - applied) recorded.
    """
    n = plan.n_size
    if n * n != frame.n_channels:
        raise GeometryError(f"plan of {n}x{n} for {frame.n_channels} channels")
    exact = plan.realized.ravel() / frame.sample_period
    shifts = np.rint(exact).astype(np.int64)
    rounding = ((exact - shifts) * frame.sample_period).reshape(n, n)
    out = np.zeros((frame.n_channels, frame.n_samples + int(shifts.max(initial=0))))
    for p, s in enumerate(shifts):
        out[p, s:s + frame.n_samples] = frame.channels[p]
    return frame.with_channels(out), DelayPlan(plan.delays, plan.error, rounding)


def verify_delay_feasibility(
    realized: DelayPlan, target: DelayPlan, baud: float
) -> dict[str, float]:
    """Max |realised - required| delay, reported in seconds and in symbols."""
    if realized.delays.shape != target.delays.shape:
        raise GeometryError("plans differ in shape")
    dev = np.abs(realized.realized - target.delays)
    k = np.unravel_index(np.argmax(dev), dev.shape)
    return {
        "max_deviation_s": float(dev.max()),
        "max_deviation_symbols": float(dev.max() * baud),
        "worst_channel": (int(k[0]) + 1, int(k[1]) + 1),
    }
