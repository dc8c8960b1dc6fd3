"""Error statistics, error injection, precision and baud sweeps, timing and memory models."""

from __future__ import annotations

import csv
import math
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .devices import (
    RegionNotFoundError,
    VtDatabase,
    build_vt_database,
    map_weights,
    params_from_finesse,
    precision_profile,
    quasi_linear_region,
)
from .network import (
    MeshSpec,
    NetworkSpec,
    WeightsBundle,
    forward_reference_batch,
    map_bundle,
    mesh_schedule,
    photonic_ffvs,
    realized_bundle,
)
from .ocu import OcuConfig

__all__ = [
    "ErrorStats",
    "CostReport",
    "REFERENCE_SERIAL",
    "REFERENCE_MESH",
    "extract_error",
    "gaussian_fit",
    "inject_errors",
    "conv_time",
    "op_count",
    "throughput_table",
    "memory_model",
    "mean_qlr_precision",
    "precision_sweep",
    "baud_sweep",
    "rows_to_csv",
    "rows_to_json",
    "error_stats_rows",
]

# Nominal execution times for the default network, kept for comparison only.
# Keys: baud -> (conv1, conv2, conv3, total) [s] and speeds [ops/s].
REFERENCE_SERIAL = {
    5e9: {"layer_times": (340e-9, 320e-9, 128e-9), "total": 788e-9,
          "speed_average": 56e9, "speed_2dconv": 71e9},
    10e9: {"layer_times": (170e-9, 160e-9, 64e-9), "total": 394e-9,
           "speed_average": 112e9, "speed_2dconv": 143e9},
    15e9: {"layer_times": (114e-9, 112e-9, 40e-9), "total": 266e-9,
           "speed_average": 166e9, "speed_2dconv": 213e9},
    20e9: {"layer_times": (86e-9, 80e-9, 32e-9), "total": 198e-9,
           "speed_average": 224e9, "speed_2dconv": 282e9},
    25e9: {"layer_times": (68e-9, 64e-9, 24e-9), "total": 156e-9,
           "speed_average": 284e9, "speed_2dconv": 357e9},
}
REFERENCE_MESH = {
    5e9: {"layer_times": (170e-9, 40e-9, 8e-9), "total": 218e-9,
          "speed_utilized": 203e9, "speed_full": 324e9},
    10e9: {"layer_times": (85e-9, 20e-9, 4e-9), "total": 109e-9,
           "speed_utilized": 406e9, "speed_full": 648e9},
    15e9: {"layer_times": (57e-9, 14e-9, 2.5e-9), "total": 73.5e-9,
           "speed_utilized": 603e9, "speed_full": 1.03e12},
    20e9: {"layer_times": (43e-9, 10e-9, 2e-9), "total": 55e-9,
           "speed_utilized": 806e9, "speed_full": 1.29e12},
    25e9: {"layer_times": (34e-9, 8e-9, 1.5e-9), "total": 43.5e-9,
           "speed_utilized": 1.02e12, "speed_full": 1.73e12},
}


@dataclass
class ErrorStats:
    baud: float
    samples: np.ndarray
    mean: float
    std: float
    accuracies: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies.size else float("nan")

    @property
    def accuracy_std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies.size else float("nan")


@dataclass
class CostReport:
    baud: float
    periods: list[int]
    layer_times: list[float]
    total_time: float
    ops: int
    speed: float
    utilization: float | None = None

    def row(self) -> dict:
        d = {"baud": self.baud, "ops": self.ops, "total_time_s": self.total_time,
             "speed_ops_per_s": self.speed}
        for l, (p, t) in enumerate(zip(self.periods, self.layer_times), 1):
            d[f"conv{l}_periods"] = p
            d[f"conv{l}_time_s"] = t
        if self.utilization is not None:
            d["average_utilization"] = self.utilization
        return d


def extract_error(ffv_photonic, ffv_reference, weighting_error_ffv) -> np.ndarray:
    """Residual FFV error once the static weighting error is removed."""
    p, r, w = (np.asarray(a, dtype=float) for a in (ffv_photonic, ffv_reference, weighting_error_ffv))
    if not (p.shape == r.shape == w.shape):
        raise ValueError(f"shape mismatch {p.shape}, {r.shape}, {w.shape}")
    return p - r - w


def gaussian_fit(errors) -> tuple[float, float]:
    """Moment fit: sample mean and unbiased standard deviation."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size < 2:
        raise ValueError("need at least two samples")
    return float(e.mean()), float(e.std(ddof=1))


def inject_errors(
    ffv_base: np.ndarray,
    labels: np.ndarray,
    bundle: WeightsBundle,
    fit: tuple[float, float],
    trials: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Classifier accuracy after adding N(mean, std) draws to every FFV element.

    ``ffv_base`` should be the reference FFVs plus weighting error.  One
    accuracy per trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    mean, std = fit
    base = np.asarray(ffv_base, dtype=float)
    labels = np.asarray(labels)
    accs = np.empty(trials)
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        noisy = base + rng.normal(mean, std, base.shape)
        accs[t] = np.mean(bundle.classify(noisy).argmax(axis=1) == labels)
    return accs


def conv_time(m_size: int, baud: float, t_c: float = 0.0) -> float:
    """Duration of one convolution period, (M(M + 2) + 2) / BR + t_c."""
    if m_size < 1 or not baud > 0 or t_c < 0:
        raise ValueError("invalid timing inputs")
    return (m_size * (m_size + 2) + 2) / baud + t_c


def op_count(spec: NetworkSpec) -> int:
    """Multiply and add per tap over all valid outputs, channels and kernels."""
    total = 0
    for layer, m in zip(spec.layers, spec.input_sizes()):
        k = m - layer.size + 1
        total += k * k * layer.size**2 * 2 * layer.in_channels * layer.kernels
    return total


def throughput_table(
    spec: NetworkSpec,
    bauds: Sequence[float],
    mesh: MeshSpec | None = None,
    t_c: float = 0.0,
) -> list[CostReport]:
    ops = op_count(spec)
    sizes = spec.input_sizes()
    if mesh is None:
        periods = [layer.in_channels * layer.kernels for layer in spec.layers]
        util = None
    else:
        sched = mesh_schedule(spec, mesh)
        periods, util = sched["periods"], sched["average_utilization"]
    out = []
    for baud in bauds:
        times = [p * conv_time(m, baud, t_c) for p, m in zip(periods, sizes)]
        total = float(sum(times))
        out.append(CostReport(float(baud), list(periods), times, total, ops, ops / total, util))
    return out


def memory_model(m_size: int, n_size: int) -> dict[str, int]:
    """Memory accesses and buffered elements for one 2-D convolution.

    An electronic-buffer OCU fetches and stores every slice,
    2 (M - N + 1)**2 accesses and (M - N + 1)**2 N**2 buffered elements.
    The delay-line OCU reads the flattened image once and writes the results
    once: 2 accesses and M**2 + (M - N + 1)**2 elements.
    """
    if not m_size > n_size >= 1:
        raise ValueError("need M > N >= 1")
    k = m_size - n_size + 1
    return {
        "tma_electronic": 2 * k * k,
        "tma_photonic": 2,
        "buffer_electronic": k * k * n_size * n_size,
        "buffer_photonic": m_size * m_size + k * k,
    }


def _product_from_finesse(f: float) -> float:
    s = (-math.pi + math.sqrt(math.pi**2 + 4 * f * f)) / (2 * f)
    return s * s


def mean_qlr_precision(db: VtDatabase) -> float:
    """Average mapping precision [bits] over the steps inside the quasi-linear region."""
    n_q = db.index_of(quasi_linear_region(db))
    return float(np.nanmean(precision_profile(db)[:n_q]))


def precision_sweep(
    finesses: Sequence[float],
    bits: Sequence[int],
    mode: str,
    images: np.ndarray,
    labels: np.ndarray,
    bundle: WeightsBundle,
    *,
    alpha: float | None = None,
    v_max: float = 1.2,
) -> list[dict]:
    """Accuracy of the reference network with mapping-only kernel errors.

    Full-range mode biases the ring on resonance at 0 V; quasi-linear mode
    biases it at the steepest point so the region starts at 0 V.  With
    ``alpha=None`` every ring is critically coupled, so zero transmission is
    reachable.
    """
    if not finesses or not bits:
        raise ValueError("finesse and bit lists must be non-empty")
    labels = np.asarray(labels)
    ffv_ref = forward_reference_batch(images, bundle)
    ref_acc = float(np.mean(bundle.classify(ffv_ref).argmax(axis=1) == labels))
    rows = []
    for f in finesses:
        a = math.sqrt(_product_from_finesse(f)) if alpha is None else alpha
        params = params_from_finesse(f, a, theta0=None if mode == "quasi-linear" else 0.0)
        # precision is always read on the quadrature-biased curve, where the region exists
        qparams = params_from_finesse(f, a, theta0=None)
        for b in bits:
            db = build_vt_database(params, v_max, int(b))
            res = np.concatenate([
                map_weights(db, w[k, c], mode).residuals.ravel()
                for w in bundle.conv_weights
                for k in range(w.shape[0]) for c in range(w.shape[1])
            ])
            cfg = OcuConfig(mrr=params, dac_bits=int(b), v_max=v_max, mapping_mode=mode)
            rb = realized_bundle(bundle, map_bundle(bundle, cfg))
            ffv = forward_reference_batch(images, rb)
            acc = float(np.mean(bundle.classify(ffv).argmax(axis=1) == labels))
            try:
                p_q = mean_qlr_precision(build_vt_database(qparams, v_max, int(b)))
            except RegionNotFoundError:
                p_q = float("nan")
            rows.append({
                "finesse": float(f), "bits": int(b), "mode": mode,
                "accuracy": acc, "reference_accuracy": ref_acc,
                "mean_abs_residual": float(np.mean(np.abs(res))),
                "max_abs_residual": float(np.max(np.abs(res))),
                "mean_precision_qlr_bits": p_q,
            })
    return rows


def baud_sweep(
    bauds: Sequence[float],
    images: np.ndarray,
    bundle: WeightsBundle,
    config: OcuConfig,
    *,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
    trials: int = 10,
    seed: int = 0,
    jobs: int = 1,
) -> list[ErrorStats]:
    """Error statistics and injected-error accuracy at each baud rate.

    ``images`` drive the photonic runs (36 error samples each).  When an
    evaluation set is given, ``trials`` Gaussian error sequences drawn from
    the fitted PDF are added to its reference-plus-weighting-error FFVs.
    """
    if not len(bauds):
        raise ValueError("baud list must be non-empty")
    images = np.asarray(images, dtype=float)
    rb = realized_bundle(bundle, map_bundle(bundle, config))
    ffv_ref = forward_reference_batch(images, bundle)
    we = forward_reference_batch(images, rb) - ffv_ref
    base = None
    if eval_images is not None:
        base = forward_reference_batch(eval_images, rb)
    out = []
    for idx, baud in enumerate(bauds):
        cfg = config.replace(baud=float(baud))
        ffv_p = photonic_ffvs(images, bundle, cfg, seed=seed, jobs=jobs)
        err = extract_error(ffv_p, ffv_ref, we).ravel()
        mean, std = gaussian_fit(err)
        stats = ErrorStats(float(baud), err, mean, std)
        if base is not None:
            cell_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
            stats.accuracies = inject_errors(base, eval_labels, bundle, (mean, std), trials, cell_seed)
        out.append(stats)
    return out


def rows_to_csv(rows: Sequence[dict]) -> str:
    """Header row plus one LF-terminated line per dict."""
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def rows_to_json(rows: Sequence[dict]) -> str:
    return json.dumps(list(rows), indent=1, sort_keys=False) + "\n"


def error_stats_rows(stats: Sequence[ErrorStats]) -> list[dict]:
    return [
        {"baud": s.baud, "n_samples": int(s.samples.size), "error_mean": s.mean,
         "error_std": s.std, "accuracy_mean": s.accuracy_mean,
         "accuracy_std": s.accuracy_std, "trials": int(s.accuracies.size)}
        for s in stats
    ]
