"""Oversampled WDM intensity waveforms: modulation, weighting, filtering, detection.

Everything is modelled in the intensity domain.  Channels sit at distinct
wavelengths and are summed incoherently by the photodetector.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import fft as sfft

from .devices import DimensionError, MrrPhysical, WeightMapping, transmission

__all__ = [
    "RangeError",
    "BoundsError",
    "WdmFrame",
    "SamplingPlan",
    "modulate",
    "apply_weights",
    "channel_filter",
    "photodetect",
    "quantize",
    "quantization_step",
    "sampling_index",
    "sample_outputs",
    "dump_waveform",
]


class RangeError(ValueError):
    pass


class BoundsError(IndexError):
    pass


@dataclass(frozen=True)
class WdmFrame:
    """N**2 equal-length intensity channels sampled ``oversampling`` times per symbol.

    Channel ``p`` (0-based) carries kernel element (i, j) = divmod(p, N) + 1.
    """

    channels: NDArray[np.float64]
    baud: float
    oversampling: int

    def __post_init__(self) -> None:
        ch = np.array(self.channels, dtype=float, ndmin=2)
        n = math.isqrt(ch.shape[0])
        if n * n != ch.shape[0]:
            raise DimensionError(f"channel count {ch.shape[0]} is not a perfect square")
        if self.oversampling < 4:
            raise ValueError("oversampling must be >= 4")
        if not self.baud > 0:
            raise ValueError("baud must be positive")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def kernel_size(self) -> int:
        return math.isqrt(self.n_channels)

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def sample_period(self) -> float:
        return 1.0 / (self.baud * self.oversampling)

    def channel_position(self, p: int) -> tuple[int, int]:
        i, j = divmod(p, self.kernel_size)
        return i + 1, j + 1

    def with_channels(self, channels: NDArray[np.float64]) -> "WdmFrame":
        return replace(self, channels=channels)


@dataclass(frozen=True)
class SamplingPlan:
    sigma: float = 0.5
    circuit_delay: float = 0.0
    adc_bits: int = 10
    full_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError(f"sigma must lie in [0, 1), got {self.sigma}")
        if not 1 <= self.adc_bits <= 16:
            raise ValueError(f"adc_bits must lie in [1, 16], got {self.adc_bits}")
        if not self.full_scale > 0:
            raise ValueError("full_scale must be positive")
        if self.circuit_delay < 0:
            raise ValueError("circuit_delay must be non-negative")


def modulate(
    flat_image: ArrayLike,
    baud: float,
    oversampling: int,
    n_channels: int,
    i_input: float = 1.0,
    guard_symbols: int = 0,
) -> WdmFrame:
    """NRZ-modulate the flattened image identically onto ``n_channels`` carriers.

    Symbol k occupies samples [k*S, (k+1)*S); ``guard_symbols`` zero symbols
    are appended.
    """
    a = np.asarray(flat_image, dtype=float).ravel()
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise RangeError("image values must lie in [0, 1]")
    if not i_input > 0:
        raise ValueError("i_input must be positive")
    line = np.concatenate([np.repeat(i_input * a, oversampling),
                           np.zeros(guard_symbols * oversampling)])
    return WdmFrame(np.tile(line, (n_channels, 1)), baud, oversampling)


def apply_weights(frame: WdmFrame, mapping: WeightMapping) -> WdmFrame:
    t = mapping.realized.ravel()
    if t.size != frame.n_channels:
        raise DimensionError(f"{t.size} weights for {frame.n_channels} channels")
    return frame.with_channels(frame.channels * t[:, None])


def channel_filter(
    frame: WdmFrame,
    params: MrrPhysical,
    mapping: WeightMapping,
    enabled: bool = True,
) -> WdmFrame:
    """Behavioural ring distortion of each (already weighted) channel.

    The intensity spectrum of channel p is multiplied by the ring power
    transmission at bias V_p, symmetrised in detuning (a real intensity needs
    an even gain) and normalised to unity at zero detuning.  Zero-padded
    linear filtering, then clamping at zero.
    """
    if not enabled:
        return frame
    v = mapping.voltages.ravel()
    if v.size != frame.n_channels:
        raise DimensionError(f"{v.size} weights for {frame.n_channels} channels")
    n = frame.n_samples
    n_fft = sfft.next_fast_len(2 * n, real=True)
    f = np.fft.rfftfreq(n_fft, d=frame.sample_period)
    spec = sfft.rfft(frame.channels, n=n_fft, axis=1)
    out = np.empty_like(frame.channels)
    for p in range(frame.n_channels):
        t0 = transmission(params, v[p], 0.0)
        if t0 == 0.0:
            out[p] = frame.channels[p]
            continue
        gain = (transmission(params, v[p], f) + transmission(params, v[p], -f)) / (2.0 * t0)
        out[p] = sfft.irfft(spec[p] * gain, n=n_fft)[:n]
    return frame.with_channels(np.maximum(out, 0.0))


def photodetect(
    frame: WdmFrame,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> NDArray[np.float64]:
    """Square-law detection: sample-wise sum over wavelengths plus optional noise."""
    if frame.n_channels == 0 or frame.n_samples == 0:
        raise DimensionError("empty frame")
    out = frame.channels.sum(axis=0)
    if noise_std > 0:
        if rng is None:
            raise ValueError("a seeded generator is required when noise is enabled")
        out = out + rng.normal(0.0, noise_std, out.shape)
    return np.maximum(out, 0.0)


def quantization_step(plan: SamplingPlan) -> float:
    return plan.full_scale / (2**plan.adc_bits - 1)


def quantize(signal: ArrayLike, plan: SamplingPlan) -> NDArray[np.float64]:
    """Mid-tread uniform ADC with 2**bits levels spanning [0, full_scale]."""
    step = quantization_step(plan)
    x = np.clip(np.asarray(signal, dtype=float), 0.0, plan.full_scale)
    return np.rint(x / step) * step


def sampling_index(m: int, n: int, m_size: int, n_size: int) -> int:
    """1-based symbol slot of output Y[m, n] in the detected stream.

    q = (m + N - 2) M + n + N - 1.  For 2x2 kernels this is the same as
    (M - N + 1)(m - 1) + (M + m) + n.
    """
    k = m_size - n_size + 1
    if not (1 <= m <= k and 1 <= n <= k):
        raise BoundsError(f"(m, n) = ({m}, {n}) outside 1..{k}")
    return (m + n_size - 2) * m_size + n + n_size - 1


def sample_outputs(
    signal: ArrayLike,
    m_size: int,
    n_size: int,
    plan: SamplingPlan,
    baud: float,
    oversampling: int,
) -> NDArray[np.float64]:
    """Read the (M-N+1)**2 outputs at t = t_c + (q - 1 + sigma) / BR, row-major."""
    x = np.asarray(signal, dtype=float)
    k = m_size - n_size + 1
    mm, nn = np.meshgrid(np.arange(1, k + 1), np.arange(1, k + 1), indexing="ij")
    q = (mm + n_size - 2) * m_size + nn + n_size - 1
    t = plan.circuit_delay + (q.ravel() - 1 + plan.sigma) / baud
    idx = np.rint(t * baud * oversampling).astype(np.int64)
    if idx.max() >= x.size:
        raise BoundsError(f"signal of {x.size} samples too short, need {idx.max() + 1}")
    return x[idx]


def dump_waveform(frame: WdmFrame, pd_output: ArrayLike | None = None) -> str:
    """CSV with columns time_s, channel_0..channel_{N^2-1}, pd_output."""
    pd = frame.channels.sum(axis=0) if pd_output is None else np.asarray(pd_output)
    n = min(frame.n_samples, pd.size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s"] + [f"channel_{p}" for p in range(frame.n_channels)] + ["pd_output"])
    for s in range(n):
        w.writerow([f"{s * frame.sample_period:.12g}"]
                   + [f"{c:.12g}" for c in frame.channels[:, s]] + [f"{pd[s]:.12g}"])
    return buf.getvalue()
