"""Optical convolution unit: one valid, stride-1 2-D convolution per period.

The chain is flatten -> modulate -> weight -> (filter) -> delay -> detect ->
ADC -> sample.  :func:`conv2d_reference` and
:func:`correlation_decomposition_check` are the exact-arithmetic oracles.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import delay as du
from .devices import (
    DimensionError,
    MrrPhysical,
    VtDatabase,
    WeightMapping,
    build_vt_database,
    critically_coupled,
    map_weights,
)
from .waveform import (
    SamplingPlan,
    apply_weights,
    channel_filter,
    modulate,
    photodetect,
    quantization_step,
    quantize,
    sample_outputs,
    sampling_index,
)

__all__ = [
    "OcuConfig",
    "OcuDiagnostics",
    "conv2d_reference",
    "conv2d_optical",
    "cross_correlate",
    "correlation_decomposition_check",
    "sampling_index",
]

DEFAULT_FINESSE = 100.0


def _default_ring() -> MrrPhysical:
    return critically_coupled(DEFAULT_FINESSE)


@dataclass(frozen=True)
class OcuConfig:
    """Assembled OCU settings.  Defaults give the 10 Gbaud operating point."""

    baud: float = 10e9
    oversampling: int = 16
    sigma: float = 0.5
    adc_bits: int = 10
    dac_bits: int = 10
    v_max: float = 1.2
    filter_enabled: bool = True
    noise_std: float = 0.0
    mrr: MrrPhysical = field(default_factory=_default_ring)
    mapping_mode: Literal["full-range", "quasi-linear"] = "full-range"
    delay_source: Literal["ideal", "dispersion", "arrayed"] = "ideal"
    delta_lambda: float = 0.2  # nm
    dispersion: float = -150.0  # ps/nm/km
    delay_error_std: float = 0.0  # s, arrayed source only
    circuit_delay: float = 0.0  # s
    i_input: float = 1.0
    adc_headroom: float = 1.0

    def __post_init__(self) -> None:
        if self.oversampling < 4:
            raise ValueError("oversampling must be >= 4")
        if not self.baud > 0:
            raise ValueError("baud must be positive")
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError("sigma must lie in [0, 1)")
        if self.delay_source not in ("ideal", "dispersion", "arrayed"):
            raise ValueError(f"unknown delay source {self.delay_source!r}")
        if self.mapping_mode not in ("full-range", "quasi-linear"):
            raise ValueError(f"unknown mapping mode {self.mapping_mode!r}")
        if self.adc_headroom < 1.0:
            raise ValueError("adc_headroom must be >= 1")

    @classmethod
    def ideal(cls, **overrides) -> "OcuConfig":
        """Filter and noise off, 16-bit converters."""
        base = dict(filter_enabled=False, noise_std=0.0, adc_bits=16, dac_bits=16)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "OcuConfig":
        return dataclasses.replace(self, **changes)

    @cached_property
    def database(self) -> VtDatabase:
        return build_vt_database(self.mrr, self.v_max, self.dac_bits)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mrr"] = dataclasses.asdict(self.mrr)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OcuConfig":
        d = dict(d)
        if isinstance(d.get("mrr"), dict):
            d["mrr"] = MrrPhysical(**d["mrr"])
        return cls(**d)


@dataclass
class OcuDiagnostics:
    mapping: WeightMapping
    delay_plan: du.DelayPlan
    full_scale: float
    adc_half_step: float  # in output units
    clipped: int


def conv2d_reference(image: ArrayLike, kernel: ArrayLike) -> NDArray:
    """Valid stride-1 correlation Y[m, n] = sum_ij w[i, j] A[m + i, n + j].

    Integer inputs stay integer.
    """
    a = np.asarray(image)
    w = np.asarray(kernel)
    if a.ndim != 2 or w.ndim != 2 or a.shape[0] != a.shape[1] or w.shape[0] != w.shape[1]:
        raise DimensionError("image and kernel must be square matrices")
    m, n = a.shape[0], w.shape[0]
    if n > m:
        raise DimensionError(f"kernel {n} larger than image {m}")
    k = m - n + 1
    out = np.zeros((k, k), dtype=np.result_type(a, w))
    for i in range(n):
        for j in range(n):
            out += w[i, j] * a[i:i + k, j:j + k]
    return out


def _delay_plan(m: int, n: int, config: OcuConfig, rng) -> du.DelayPlan:
    if config.delay_source == "ideal":
        return du.required_delays(m, n, config.baud)
    if config.delay_source == "dispersion":
        res = du.resource_requirements(m, n, config.delta_lambda, config.dispersion, config.baud)
        grid = du.pmws_grid(m, n, config.delta_lambda)
        return du.dispersion_delays(grid, du.DispersionMedium(config.dispersion, res["length_km"]))
    if rng is None:
        rng = np.random.default_rng(0)
    return du.arrayed_delays(m, n, config.baud, config.delay_error_std, rng)


def conv2d_optical(
    image: ArrayLike,
    kernel: ArrayLike,
    config: OcuConfig,
    *,
    mapping: WeightMapping | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[NDArray[np.float64], OcuDiagnostics]:
    """Run one convolution period through the simulated OCU.

    The output is rescaled by the mapping normalisation so it is directly
    comparable with ``conv2d_reference(image, kernel)``.  ``mapping`` may be
    passed to reuse a precomputed weight-bank setting.
    """
    a = np.asarray(image, dtype=float)
    w = np.asarray(kernel, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("image must be square")
    m, n = a.shape[0], w.shape[0]
    if mapping is None:
        mapping = map_weights(config.database, w, config.mapping_mode)
    elif mapping.shape != w.shape:
        raise DimensionError("mapping does not match kernel shape")

    frame = modulate(a.ravel(), config.baud, config.oversampling, n * n,
                     config.i_input, guard_symbols=(n - 1) * (m + 1))
    frame = apply_weights(frame, mapping)
    frame = channel_filter(frame, config.mrr, mapping, enabled=config.filter_enabled)
    plan = _delay_plan(m, n, config, rng)
    frame, plan = du.apply_delays(frame, plan)
    detected = photodetect(frame, config.noise_std, rng)

    full_scale = max(config.i_input * float(mapping.realized.sum()), 1e-12) * config.adc_headroom
    sp = SamplingPlan(config.sigma, config.circuit_delay, config.adc_bits, full_scale)
    clipped = int(np.count_nonzero(detected > full_scale))
    samples = sample_outputs(quantize(detected, sp), m, n, sp, config.baud, config.oversampling)

    k = m - n + 1
    gain = mapping.scale / config.i_input
    diag = OcuDiagnostics(
        mapping=mapping,
        delay_plan=plan,
        full_scale=full_scale,
        adc_half_step=0.5 * quantization_step(sp) * gain,
        clipped=clipped,
    )
    return samples.reshape(k, k) * gain, diag


def cross_correlate(x: ArrayLike, y: ArrayLike) -> NDArray:
    """Full cross-correlation R(x, y)[q] = sum_j y_j x_{q + j - len(y)}, q = 1..len(x)+len(y)-1."""
    x = np.asarray(x)
    y = np.asarray(y)
    lx, ly = x.size, y.size
    out = np.zeros(lx + ly - 1, dtype=np.result_type(x, y))
    for j in range(ly):
        # y_{j+1} pairs x_1 with output q = ly - j (1-based)
        start = ly - 1 - j
        out[start:start + lx] += y[j] * x
    return out


def correlation_decomposition_check(flat_image: ArrayLike, kernel: ArrayLike) -> dict:
    """Compare the summed, delayed weighted rows with the double-correlation form.

    The left side builds every delayed row w_ij * A' explicitly.  The right
    side correlates A' with each kernel row, then with a one-hot selector of
    length (N - 1) M + 1 whose single 1 sits at offset (i - 1) M, which places
    group i at its row delay.
    """
    a = np.asarray(flat_image).ravel()
    w = np.asarray(kernel)
    m = int(round(np.sqrt(a.size)))
    n = w.shape[0]
    if m * m != a.size or w.shape != (n, n) or n > m:
        raise DimensionError("flat image must have M**2 entries and kernel be N x N, N <= M")
    length = m * m + (n - 1) * (m + 1)
    dtype = np.result_type(a, w)

    lhs = np.zeros(length, dtype=dtype)
    top = (n - 1) * m + (n - 1)
    for i in range(n):
        for j in range(n):
            d = top - (i * m + j)
            lhs[d:d + a.size] += w[i, j] * a

    rhs = np.zeros(length, dtype=dtype)
    for i in range(n):
        sel = np.zeros((n - 1) * m + 1, dtype=dtype)
        sel[i * m] = 1
        rhs += cross_correlate(cross_correlate(a, w[i]), sel)

    return {"lhs": lhs, "rhs": rhs, "max_diff": np.abs(lhs - rhs).max()}
