"""Micro-ring weight bank: through-port transmission, V-T databases and weight mapping.

The through port of an all-pass ring driven by an electro-optic bias ``V`` has
power transmission

    T = 1 - (1 - a^2)(1 - t^2) / ((1 - a t)^2 + 4 a t sin^2(theta / 2))
    theta = theta0 + pi V / V_pi + 2 pi f / FSR

with ``t`` the self-coupling amplitude, ``a`` the round-trip loss factor and
``f`` an optional optical detuning (used by the behavioural channel filter).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize, signal

__all__ = [
    "ParameterError",
    "InfeasibleError",
    "RegionNotFoundError",
    "GridLookupError",
    "UnmappableWeightError",
    "DimensionError",
    "MrrPhysical",
    "VtDatabase",
    "WeightMapping",
    "finesse",
    "transmission",
    "params_from_finesse",
    "critically_coupled",
    "quadrature_bias",
    "build_vt_database",
    "quasi_linear_region",
    "mapping_precision",
    "precision_profile",
    "map_weights",
    "weighting_error",
]

DEFAULT_V_MAX = 1.2
DEFAULT_V_PI = 20.0
DEFAULT_FSR = 2e12
DEFAULT_ALPHA = 0.99


class ParameterError(ValueError):
    """Physical parameters outside their admissible range."""


class InfeasibleError(ValueError):
    pass


class RegionNotFoundError(ValueError):
    pass


class GridLookupError(KeyError):
    """Voltage not found on the database grid."""


class UnmappableWeightError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def finesse(tau: float, alpha: float) -> float:
    """Ring finesse pi*sqrt(a t) / (1 - a t)."""
    x = alpha * tau
    return math.pi * math.sqrt(x) / (1.0 - x)


@dataclass(frozen=True)
class MrrPhysical:
    """
    All-pass micro-ring parameters.

    Parameters
    ----------
    tau : float
        Amplitude self-coupling between ring and bus, 0 < tau < 1.
    alpha : float
        Round-trip amplitude loss factor, 0 < alpha <= 1.
    theta0 : float
        Bias phase at zero volts [rad].
    v_pi : float
        Voltage producing a pi round-trip phase shift [V].
    fsr : float
        Free spectral range [Hz].
    """

    tau: float
    alpha: float
    theta0: float = 0.0
    v_pi: float = DEFAULT_V_PI
    fsr: float = DEFAULT_FSR

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ParameterError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.v_pi > 0:
            raise ParameterError(f"v_pi must be positive, got {self.v_pi}")
        if not self.fsr > 0:
            raise ParameterError(f"fsr must be positive, got {self.fsr}")

    @property
    def finesse(self) -> float:
        return finesse(self.tau, self.alpha)

    @property
    def fwhm(self) -> float:
        """Resonance full width at half maximum [Hz]."""
        return self.fsr / self.finesse


def transmission(params: MrrPhysical, v: ArrayLike, detuning: ArrayLike = 0.0):
    """Through-port power transmission at bias ``v`` [V] and detuning [Hz].

    Broadcasts over ``v`` and ``detuning``; scalars in give a float out.
    """
    v_arr = np.asarray(v, dtype=float)
    if np.any(v_arr < 0):
        raise ParameterError("bias voltage must be non-negative")
    a, t = params.alpha, params.tau
    theta = (
        params.theta0
        + math.pi * v_arr / params.v_pi
        + 2.0 * math.pi * np.asarray(detuning, dtype=float) / params.fsr
    )
    denom = (1.0 - a * t) ** 2 + 4.0 * a * t * np.sin(theta / 2.0) ** 2
    out = 1.0 - (1.0 - a * a) * (1.0 - t * t) / denom
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def params_from_finesse(
    finesse_value: float,
    alpha: float = DEFAULT_ALPHA,
    *,
    theta0: float | None = 0.0,
    v_pi: float = DEFAULT_V_PI,
    fsr: float = DEFAULT_FSR,
) -> MrrPhysical:
    """Solve the coupling ``tau`` giving the requested finesse at fixed loss.

    With s = sqrt(alpha*tau) the finesse relation is the quadratic
    F s^2 + pi s - F = 0, whose positive root is taken.  Pass
    ``theta0=None`` to bias the ring at its steepest slope (see
    :func:`quadrature_bias`).
    """
    if not finesse_value > 0:
        raise InfeasibleError(f"finesse must be positive, got {finesse_value}")
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    f = float(finesse_value)
    s = (-math.pi + math.sqrt(math.pi**2 + 4.0 * f * f)) / (2.0 * f)
    tau = s * s / alpha
    if not 0.0 < tau < 1.0:
        raise InfeasibleError(
            f"no coupling in (0, 1) reaches finesse {f} with alpha={alpha}"
        )
    if theta0 is None:
        theta0 = quadrature_bias(tau, alpha)
    return MrrPhysical(tau=tau, alpha=alpha, theta0=theta0, v_pi=v_pi, fsr=fsr)


def critically_coupled(
    finesse_value: float, *, v_pi: float = DEFAULT_V_PI, fsr: float = DEFAULT_FSR
) -> MrrPhysical:
    """Ring with tau == alpha at the given finesse (full extinction on resonance)."""
    f = float(finesse_value)
    s = (-math.pi + math.sqrt(math.pi**2 + 4.0 * f * f)) / (2.0 * f)
    return MrrPhysical(tau=s, alpha=s, theta0=0.0, v_pi=v_pi, fsr=fsr)


def quadrature_bias(tau: float, alpha: float) -> float:
    """Round-trip phase of maximum dT/dtheta on the rising flank, in (0, pi)."""
    a, t = alpha, tau
    num = (1.0 - a * a) * (1.0 - t * t)
    b = (1.0 - a * t) ** 2
    c = 4.0 * a * t

    def neg_slope(theta):
        return -num * c * math.sin(theta) / 2.0 / (b + c * math.sin(theta / 2.0) ** 2) ** 2

    # the peak sits within a few linewidths of resonance
    hw = (1.0 - a * t) / math.sqrt(a * t)
    res = optimize.minimize_scalar(
        neg_slope, bounds=(1e-9, min(math.pi, 20.0 * hw)), method="bounded",
        options={"xatol": 1e-14},
    )
    return float(res.x)


@dataclass(frozen=True)
class VtDatabase:
    """Quantized voltage -> transmission lookup, one row per DAC code."""

    voltages: NDArray[np.float64]
    transmissions: NDArray[np.float64]
    dac_bits: int
    v_max: float

    def __post_init__(self) -> None:
        v = np.array(self.voltages, dtype=float)
        t = np.array(self.transmissions, dtype=float)
        if v.shape != t.shape or v.ndim != 1:
            raise DimensionError("voltages and transmissions must be equal-length vectors")
        if len(v) != 2**self.dac_bits:
            raise DimensionError(f"expected {2 ** self.dac_bits} entries, got {len(v)}")
        if np.any(np.diff(v) <= 0):
            raise ParameterError("voltages must be strictly increasing")
        if np.any((t < 0) | (t > 1)):
            raise ParameterError("transmissions must lie in [0, 1]")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "transmissions", t)

    def __len__(self) -> int:
        return len(self.voltages)

    @property
    def entries(self) -> list[tuple[float, float]]:
        return list(zip(self.voltages.tolist(), self.transmissions.tolist()))

    def index_of(self, v: float) -> int:
        step = self.v_max / (len(self) - 1)
        i = int(round(v / step))
        if not 0 <= i < len(self) or abs(self.voltages[i] - v) > 1e-9 * max(step, 1.0):
            raise GridLookupError(f"{v} V is not a grid voltage")
        return i

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["voltage", "transmission"])
        for v, t in zip(self.voltages, self.transmissions):
            w.writerow([f"{v:.12g}", f"{t:.12g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, v_max: float | None = None) -> "VtDatabase":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["voltage", "transmission"]:
            raise ValueError("missing 'voltage,transmission' header")
        data = np.array(rows[1:], dtype=float)
        bits = int(round(math.log2(len(data))))
        return cls(data[:, 0], data[:, 1], bits, v_max if v_max is not None else data[-1, 0])


def build_vt_database(
    params: MrrPhysical, v_max: float = DEFAULT_V_MAX, dac_bits: int = 10
) -> VtDatabase:
    """Sweep the bias over ``2**dac_bits`` uniform codes in [0, v_max]."""
    if not 1 <= dac_bits <= 16:
        raise ParameterError(f"dac_bits must lie in [1, 16], got {dac_bits}")
    if not v_max > 0:
        raise ParameterError("v_max must be positive")
    v = np.linspace(0.0, v_max, 2**dac_bits)
    return VtDatabase(v, transmission(params, v), dac_bits, float(v_max))


def _steps(db: VtDatabase) -> NDArray[np.float64]:
    return np.diff(db.transmissions)


def quasi_linear_region(db: VtDatabase) -> float:
    """Upper voltage ``v_l`` of the quasi-linear region.

    The per-step gradient |T(v_i) - T(v_{i-1})| is compared against the top
    third of its observed range; ``v_l`` is the last grid voltage of the run
    of qualifying steps that starts at the first step.
    """
    g = np.abs(_steps(db))
    lo, hi = float(g.min()), float(g.max())
    if hi == 0.0:
        raise RegionNotFoundError("transmission is constant")
    threshold = lo + 2.0 / 3.0 * (hi - lo)
    ok = g >= threshold - 1e-9 * hi
    if not ok[0]:
        raise RegionNotFoundError("gradient at the first step is outside the top third")
    n = len(ok) if ok.all() else int(np.argmin(ok))
    return float(db.voltages[n])


def mapping_precision(db: VtDatabase, v_i: float) -> float | None:
    """Bits of mapping precision log2(1 / |T(v_i) - T(v_{i-1})|).

    Returns ``None`` for a flat step.
    """
    i = db.index_of(v_i)
    if i == 0:
        raise GridLookupError("the first grid voltage has no predecessor")
    step = abs(db.transmissions[i] - db.transmissions[i - 1])
    if step == 0.0:
        return None
    return -math.log2(step)


def precision_profile(db: VtDatabase) -> NDArray[np.float64]:
    """Vectorised mapping precision for codes 1..2**bits-1; NaN marks flat steps."""
    step = np.abs(_steps(db))
    out = np.full(step.shape, np.nan)
    nz = step > 0
    out[nz] = -np.log2(step[nz])
    return out


@dataclass(frozen=True)
class WeightMapping:
    """
    Kernel realised on a weight bank.

    ``targets`` are the normalised kernel values searched for in the
    database; the physical kernel equals ``targets * scale``.  ``residuals``
    are T' - target.
    """

    mode: Literal["full-range", "quasi-linear"]
    scale: float
    weights: NDArray[np.float64]
    targets: NDArray[np.float64]
    codes: NDArray[np.int64]
    voltages: NDArray[np.float64]
    realized: NDArray[np.float64]
    residuals: NDArray[np.float64]
    max_gap: float = field(default=0.0)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.shape

    def realized_kernel(self) -> NDArray[np.float64]:
        """Kernel actually applied, in the units of the input weights."""
        return self.realized * self.scale

    def records(self) -> list[dict]:
        return [
            {"w": float(w), "v": float(v), "t_realized": float(t), "residual": float(r)}
            for w, v, t, r in zip(
                self.weights.ravel(), self.voltages.ravel(),
                self.realized.ravel(), self.residuals.ravel(),
            )
        ]

    def to_json(self) -> str:
        return json.dumps(
            {"mode": self.mode, "scale": self.scale, "shape": list(self.shape),
             "records": self.records()},
            indent=1,
        )


def map_weights(
    db: VtDatabase,
    kernel: ArrayLike,
    mode: Literal["full-range", "quasi-linear"] = "full-range",
) -> WeightMapping:
    """Choose, per kernel element, the DAC code whose transmission is nearest.

    Full-range mode searches the whole database after dividing the kernel by
    max|w| when that exceeds one.  Quasi-linear mode rescales the kernel so
    its maximum lands on the largest transmission of the quasi-linear region
    and only searches codes with V <= v_l.  Ties go to the lower voltage.
    """
    w = np.asarray(kernel, dtype=float)
    if not np.all(np.isfinite(w)):
        raise UnmappableWeightError("kernel contains non-finite values")
    if np.any(w < 0):
        raise UnmappableWeightError("negative weights cannot be realised as transmissions")

    if mode == "full-range":
        peak = float(w.max(initial=0.0))
        scale = peak if peak > 1.0 else 1.0
        n_codes = len(db)
    elif mode == "quasi-linear":
        v_l = quasi_linear_region(db)
        n_codes = db.index_of(v_l) + 1
        t_top = float(db.transmissions[:n_codes].max())
        peak = float(w.max(initial=0.0))
        scale = peak / t_top if peak > 0 else 1.0
    else:
        raise ValueError(f"unknown mapping mode {mode!r}")

    targets = w / scale
    t_grid = db.transmissions[:n_codes]
    # argmin returns the first (lowest-voltage) code on ties
    codes = np.abs(t_grid[None, :] - targets.reshape(-1, 1)).argmin(axis=1).reshape(w.shape)
    realized = t_grid[codes]
    return WeightMapping(
        mode=mode,
        scale=float(scale),
        weights=w,
        targets=targets,
        codes=codes.astype(np.int64),
        voltages=db.voltages[codes],
        realized=realized,
        residuals=realized - targets,
        max_gap=float(np.abs(np.diff(t_grid)).max(initial=0.0)),
    )


def weighting_error(mapping: WeightMapping, image: ArrayLike) -> NDArray[np.float64]:
    """Contribution of the mapping residuals to each valid convolution output.

    ``image`` may be given flattened (length M**2) or as an M x M matrix.
    The result is in the units of the original kernel, flattened row-major.
    """
    a = np.asarray(image, dtype=float)
    n = mapping.shape[0]
    if mapping.residuals.ndim != 2 or mapping.shape[1] != n:
        raise DimensionError("mapping must hold a square kernel")
    if a.ndim == 1:
        m = math.isqrt(a.size)
        if m * m != a.size:
            raise DimensionError(f"flat image length {a.size} is not a square")
        a = a.reshape(m, m)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < n:
        raise DimensionError(f"image shape {a.shape} incompatible with {n}x{n} kernel")
    err = signal.correlate2d(a, mapping.residuals * mapping.scale, mode="valid")
    return err.ravel()
