"""Three-conv-layer CNN: desk-scale training, exact and photonic forward passes, mesh scheduling.

Convolution kernels are kept non-negative so they can be realised as ring
transmissions; biases, ReLU, pooling and the 36 -> 10 classifier run in the
digital back end.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .devices import WeightMapping, map_weights
from .ocu import OcuConfig, conv2d_optical, conv2d_reference

__all__ = [
    "ConvLayerSpec",
    "NetworkSpec",
    "WeightsBundle",
    "MeshSpec",
    "TrainingFailedError",
    "default_spec",
    "train_reference",
    "forward_reference",
    "forward_reference_batch",
    "map_bundle",
    "realized_bundle",
    "forward_photonic",
    "evaluate",
    "mesh_schedule",
    "calibrate_sigma",
    "save_bundle",
    "load_bundle",
]


class TrainingFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvLayerSpec:
    kernels: int
    size: int
    in_channels: int
    pool: bool


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[ConvLayerSpec, ...]
    input_size: int = 28
    n_classes: int = 10

    def input_sizes(self) -> list[int]:
        """Spatial size M_l entering each conv layer."""
        sizes, m = [], self.input_size
        for layer in self.layers:
            sizes.append(m)
            m = m - layer.size + 1
            if layer.pool:
                m //= 2
        return sizes

    def output_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after each layer's activation and pooling."""
        out = []
        for layer, m in zip(self.layers, self.input_sizes()):
            s = m - layer.size + 1
            if layer.pool:
                s //= 2
            out.append((layer.kernels, s, s))
        return out

    @property
    def flatten_length(self) -> int:
        return int(np.prod(self.output_shapes()[-1]))


def default_spec() -> NetworkSpec:
    return NetworkSpec(
        layers=(
            ConvLayerSpec(kernels=2, size=3, in_channels=1, pool=True),
            ConvLayerSpec(kernels=4, size=3, in_channels=2, pool=True),
            ConvLayerSpec(kernels=4, size=3, in_channels=4, pool=False),
        )
    )


@dataclass
class WeightsBundle:
    """Trained parameters.  ``conv_weights[l]`` has shape (K, C, N, N)."""

    spec: NetworkSpec
    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    fc_weight: np.ndarray  # (n_classes, flatten_length)
    fc_bias: np.ndarray
    metadata: dict = field(default_factory=dict)

    def with_kernels(self, kernels: list[np.ndarray]) -> "WeightsBundle":
        return WeightsBundle(self.spec, [np.asarray(k, float) for k in kernels],
                             self.conv_biases, self.fc_weight, self.fc_bias, dict(self.metadata))

    def classify(self, ffv: np.ndarray) -> np.ndarray:
        return np.asarray(ffv) @ self.fc_weight.T + self.fc_bias


@dataclass(frozen=True)
class MeshSpec:
    rows: int = 4  # kernel slots
    cols: int = 4  # channel slots

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("mesh dimensions must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "MeshSpec":
        r, c = text.lower().split("x")
        return cls(int(r), int(c))


# -- batched numpy layers --------------------------------------------------

def _conv(x, w, b):
    n = w.shape[-1]
    win = sliding_window_view(x, (n, n), axis=(2, 3))
    return np.einsum("bchwij,kcij->bkhw", win, w, optimize=True) + b[None, :, None, None], win


def _conv_backward(dz, win, w, x_shape):
    dw = np.einsum("bkhw,bchwij->kcij", dz, win, optimize=True)
    db = dz.sum(axis=(0, 2, 3))
    dx = np.zeros(x_shape)
    n = w.shape[-1]
    ho, wo = dz.shape[2:]
    for i in range(n):
        for j in range(n):
            dx[:, :, i:i + ho, j:j + wo] += np.einsum("bkhw,kc->bchw", dz, w[:, :, i, j])
    return dw, db, dx


def _pool(a):
    b, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    crop = a[:, :, : 2 * h2, : 2 * w2]
    out = crop.reshape(b, c, h2, 2, w2, 2).max(axis=(3, 5))
    return out, crop


def _pool_backward(dout, crop, out, full_shape):
    up = np.repeat(np.repeat(out, 2, axis=2), 2, axis=3)
    mask = crop == up
    grad = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * mask
    dx = np.zeros(full_shape)
    dx[:, :, : grad.shape[2], : grad.shape[3]] = grad
    return dx


def _forward_batch(x, params, spec, cache=None):
    a = x
    for l, layer in enumerate(spec.layers):
        z, win = _conv(a, params["w"][l], params["b"][l])
        r = np.maximum(z, 0.0)
        if cache is not None:
            cache.append({"in_shape": a.shape, "win": win, "z": z})
        if layer.pool:
            p, crop = _pool(r)
            if cache is not None:
                cache[-1].update(crop=crop, pooled=p, r_shape=r.shape)
            a = p
        else:
            a = r
    ffv = a.reshape(a.shape[0], -1)
    return ffv


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _init_params(spec: NetworkSpec, rng: np.random.Generator) -> dict:
    w, b = [], []
    for layer in spec.layers:
        fan_in = layer.in_channels * layer.size**2
        # non-negative kernels: unit mean gain per layer keeps activations O(1)
        w.append(rng.uniform(0.0, 2.0 / fan_in,
                             (layer.kernels, layer.in_channels, layer.size, layer.size)))
        b.append(np.zeros(layer.kernels))
    n_feat = spec.flatten_length
    fc_w = rng.normal(0.0, 1.0 / math.sqrt(n_feat), (spec.n_classes, n_feat))
    return {"w": w, "b": b, "fc_w": fc_w, "fc_b": np.zeros(spec.n_classes)}


def train_reference(
    images: np.ndarray,
    labels: np.ndarray,
    spec: NetworkSpec | None = None,
    epochs: int = 10,
    seed: int = 0,
    *,
    lr: float = 0.02,
    momentum: float = 0.9,
    batch_size: int = 32,
    min_accuracy: float = 0.6,
) -> WeightsBundle:
    """Mini-batch SGD with momentum on cross-entropy, projecting conv kernels onto w >= 0.

    The learning rate follows a cosine decay over all steps.  Deterministic
    for a given seed.
    """
    spec = spec or default_spec()
    x_all = np.asarray(images, dtype=float)
    if x_all.min() < 0 or x_all.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    x_all = x_all.reshape(len(x_all), spec.layers[0].in_channels, spec.input_size, spec.input_size)
    y_all = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    params = _init_params(spec, rng)
    vel = {k: ([np.zeros_like(a) for a in v] if isinstance(v, list) else np.zeros_like(v))
           for k, v in params.items()}
    n = len(y_all)
    steps_total = epochs * math.ceil(n / batch_size)
    # short linear warm-up: large early steps can zero every kernel at once
    warmup = max(1, steps_total // 20)
    step = 0

    def update(key, grad, idx=None):
        p = params[key] if idx is None else params[key][idx]
        v = vel[key] if idx is None else vel[key][idx]
        v *= momentum
        v -= rate * grad
        p += v

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rate = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps_total))
            rate *= min(1.0, (step + 1) / warmup)
            step += 1
            idx = order[start:start + batch_size]
            x, y = x_all[idx], y_all[idx]
            cache: list = []
            ffv = _forward_batch(x, params, spec, cache)
            probs = _softmax(ffv @ params["fc_w"].T + params["fc_b"])
            dlog = probs
            dlog[np.arange(len(y)), y] -= 1.0
            dlog /= len(y)
            g_fc_w = dlog.T @ ffv
            g_fc_b = dlog.sum(axis=0)
            da = (dlog @ params["fc_w"]).reshape(x.shape[0], *spec.output_shapes()[-1])
            grads = []
            for l in reversed(range(len(spec.layers))):
                c = cache[l]
                if spec.layers[l].pool:
                    da = _pool_backward(da, c["crop"], c["pooled"], c["r_shape"])
                dz = da * (c["z"] > 0)
                dw, db, da = _conv_backward(dz, c["win"], params["w"][l], c["in_shape"])
                grads.append((l, dw, db))
            update("fc_w", g_fc_w)
            update("fc_b", g_fc_b)
            for l, dw, db in grads:
                update("w", dw, l)
                update("b", db, l)
                np.maximum(params["w"][l], 0.0, out=params["w"][l])

    bundle = WeightsBundle(spec, params["w"], params["b"], params["fc_w"], params["fc_b"])
    pred = bundle.classify(forward_reference_batch(x_all, bundle)).argmax(axis=1)
    acc = float(np.mean(pred == y_all))
    bundle.metadata = {"seed": seed, "epochs": epochs, "train_samples": int(n),
                       "final_train_accuracy": acc, "lr": lr, "momentum": momentum,
                       "batch_size": batch_size}
    if acc < min_accuracy:
        raise TrainingFailedError(f"training accuracy {acc:.3f} below {min_accuracy}")
    return bundle


def forward_reference_batch(images: np.ndarray, bundle: WeightsBundle) -> np.ndarray:
    """Flatten feature vectors for a batch of images (exact arithmetic)."""
    spec = bundle.spec
    x = np.asarray(images, dtype=float).reshape(
        -1, spec.layers[0].in_channels, spec.input_size, spec.input_size)
    params = {"w": bundle.conv_weights, "b": bundle.conv_biases}
    return _forward_batch(x, params, spec)


def _relu_pool(z, pool):
    r = np.maximum(z, 0.0)
    if not pool:
        return r
    return _pool(r[None])[0][0]


def forward_reference(image: np.ndarray, bundle: WeightsBundle) -> dict:
    """Per-layer feature maps, the flatten feature vector and softmax scores for one image."""
    spec = bundle.spec
    a = np.asarray(image, dtype=float).reshape(
        spec.layers[0].in_channels, spec.input_size, spec.input_size)
    maps = []
    for l, layer in enumerate(spec.layers):
        w, b = bundle.conv_weights[l], bundle.conv_biases[l]
        z = np.stack([
            sum(conv2d_reference(a[c], w[k, c]) for c in range(layer.in_channels)) + b[k]
            for k in range(layer.kernels)
        ])
        a = _relu_pool(z, layer.pool)
        maps.append(a)
    ffv = a.ravel()
    logits = bundle.classify(ffv)
    return {"feature_maps": maps, "ffv": ffv, "scores": _softmax(logits[None])[0]}


def map_bundle(bundle: WeightsBundle, config: OcuConfig) -> list[list[list[WeightMapping]]]:
    """Weight-bank setting for every (layer, kernel, channel) slice."""
    db = config.database
    return [
        [[map_weights(db, w[k, c], config.mapping_mode) for c in range(w.shape[1])]
         for k in range(w.shape[0])]
        for w in bundle.conv_weights
    ]


def realized_bundle(bundle: WeightsBundle, mappings) -> WeightsBundle:
    """Bundle whose kernels are the transmissions actually realised (times scale)."""
    kernels = [
        np.array([[m.realized_kernel() for m in row] for row in layer])
        for layer in mappings
    ]
    return bundle.with_kernels(kernels)


def _periods(layer: ConvLayerSpec, mesh: MeshSpec | None) -> int:
    if mesh is None:
        return layer.in_channels * layer.kernels
    return math.ceil(layer.in_channels / mesh.cols) * math.ceil(layer.kernels / mesh.rows)


def forward_photonic(
    image: np.ndarray,
    bundle: WeightsBundle,
    config: OcuConfig,
    mesh: MeshSpec | None = None,
    *,
    mappings=None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Forward pass with every (channel, kernel) convolution run through the OCU.

    Each input channel is normalised to [0, 1] before modulation and the
    detected result rescaled in the DSP; per-kernel channel sums, bias, ReLU
    and pooling are digital.  The mesh only regroups passes into periods, so
    values are identical with or without it.
    """
    spec = bundle.spec
    if mappings is None:
        mappings = map_bundle(bundle, config)
    if rng is None and config.noise_std > 0:
        rng = np.random.default_rng(0)
    a = np.asarray(image, dtype=float).reshape(
        spec.layers[0].in_channels, spec.input_size, spec.input_size)
    maps, periods, clipped, half_steps = [], [], 0, []
    for l, layer in enumerate(spec.layers):
        w, b = bundle.conv_weights[l], bundle.conv_biases[l]
        m = a.shape[1]
        k_out = m - layer.size + 1
        z = np.tile(b[:, None, None], (1, k_out, k_out)).astype(float)
        for k in range(layer.kernels):
            for c in range(layer.in_channels):
                peak = float(a[c].max())
                if peak <= 0.0:
                    continue
                y, diag = conv2d_optical(a[c] / peak, w[k, c], config,
                                         mapping=mappings[l][k][c], rng=rng)
                z[k] += y * peak
                clipped += diag.clipped
                half_steps.append(diag.adc_half_step * peak)
        a = _relu_pool(z, layer.pool)
        maps.append(a)
        periods.append(_periods(layer, mesh))
    ffv = a.ravel()
    logits = bundle.classify(ffv)
    return {
        "feature_maps": maps,
        "ffv": ffv,
        "scores": _softmax(logits[None])[0],
        "diagnostics": {"periods": periods, "clipped": clipped,
                        "max_adc_half_step": max(half_steps, default=0.0)},
    }


def _photonic_chunk(args):
    images, seeds, bundle, config, mesh = args
    mappings = map_bundle(bundle, config)
    return np.array([
        forward_photonic(img, bundle, config, mesh, mappings=mappings,
                         rng=np.random.default_rng(s))["ffv"]
        for img, s in zip(images, seeds)
    ])


def photonic_ffvs(
    images: np.ndarray,
    bundle: WeightsBundle,
    config: OcuConfig,
    mesh: MeshSpec | None = None,
    *,
    seed: int = 0,
    jobs: int = 1,
) -> np.ndarray:
    """FFVs of the photonic forward pass for a batch; image i uses seed (seed, i)."""
    images = np.asarray(images, dtype=float)
    seeds = [np.random.SeedSequence([seed, i]) for i in range(len(images))]
    if jobs <= 1 or len(images) < 2:
        return _photonic_chunk((images, seeds, bundle, config, mesh))
    bounds = np.linspace(0, len(images), min(jobs, len(images)) + 1).astype(int)
    tasks = [(images[s:e], seeds[s:e], bundle, config, mesh)
             for s, e in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_photonic_chunk, tasks))
    return np.concatenate(parts)


def confusion_matrix(labels, predictions, n_classes: int = 10) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def evaluate(
    images: np.ndarray,
    labels: np.ndarray,
    bundle: WeightsBundle,
    config: OcuConfig | None = None,
    mesh: MeshSpec | None = None,
    *,
    seed: int = 0,
    jobs: int = 1,
) -> dict:
    """Accuracy and confusion matrix (rows true, columns predicted).

    ``config=None`` evaluates the exact reference network.
    """
    if config is None:
        ffv = forward_reference_batch(images, bundle)
    else:
        ffv = photonic_ffvs(images, bundle, config, mesh, seed=seed, jobs=jobs)
    pred = bundle.classify(ffv).argmax(axis=1)
    labels = np.asarray(labels)
    return {
        "accuracy": float(np.mean(pred == labels)),
        "confusion": confusion_matrix(labels, pred, bundle.spec.n_classes),
        "predictions": pred,
        "ffv": ffv,
    }


def mesh_schedule(spec: NetworkSpec, mesh: MeshSpec) -> dict:
    """Periods and weight-bank utilisation per layer on a rows x cols mesh."""
    slots = mesh.rows * mesh.cols
    periods, util = [], []
    for layer in spec.layers:
        p = _periods(layer, mesh)
        periods.append(p)
        util.append(layer.in_channels * layer.kernels / (p * slots))
    return {"periods": periods, "utilization": util,
            "average_utilization": float(np.mean(util))}


def calibrate_sigma(
    image: np.ndarray,
    bundle: WeightsBundle,
    config: OcuConfig,
    sigma_grid: Sequence[float],
) -> float:
    """Grid sigma minimising the RMS first-layer error against the exact convolution.

    Ties (within 1e-12 relative) go to the sigma closest to 0.5.
    """
    grid = [float(s) for s in sigma_grid]
    if not grid or any(not 0.0 <= s < 1.0 for s in grid):
        raise ValueError("sigma grid must be a non-empty subset of [0, 1)")
    layer = bundle.spec.layers[0]
    w = bundle.conv_weights[0]
    a = np.asarray(image, dtype=float).reshape(layer.in_channels, bundle.spec.input_size, -1)
    db = config.database
    maps = {(k, c): map_weights(db, w[k, c], config.mapping_mode)
            for k in range(layer.kernels) for c in range(layer.in_channels)}
    cost = []
    for s in grid:
        cfg = config.replace(sigma=s)
        err = []
        for (k, c), mp in maps.items():
            y, _ = conv2d_optical(a[c], w[k, c], cfg, mapping=mp,
                                  rng=np.random.default_rng(0))
            err.append((y - conv2d_reference(a[c], w[k, c])).ravel())
        cost.append(float(np.sqrt(np.mean(np.concatenate(err) ** 2))))
    best = min(cost)
    tied = [s for s, c in zip(grid, cost) if c <= best + 1e-12 * max(best, 1e-300)]
    return min(tied, key=lambda s: (abs(s - 0.5), s))


# -- persistence -----------------------------------------------------------

def _flat_params(bundle: WeightsBundle):
    for w, b in zip(bundle.conv_weights, bundle.conv_biases):
        yield w
        yield b
    yield bundle.fc_weight
    yield bundle.fc_bias


def bundle_bytes(bundle: WeightsBundle) -> bytes:
    return np.concatenate([np.asarray(a, "<f8").ravel() for a in _flat_params(bundle)]).astype("<f8").tobytes()


def bundle_metadata(bundle: WeightsBundle) -> dict:
    """JSON side-car describing the binary layout.

    Arrays are stored consecutively as little-endian float64, row-major:
    for each conv layer its kernels (K, C, N, N) then biases (K,), followed
    by the classifier weight (classes, features) and bias (classes,).
    """
    arrays, offset = [], 0
    names = []
    for l in range(len(bundle.conv_weights)):
        names += [f"conv{l + 1}.weight", f"conv{l + 1}.bias"]
    names += ["fc.weight", "fc.bias"]
    for name, a in zip(names, _flat_params(bundle)):
        arrays.append({"name": name, "shape": list(np.shape(a)), "offset": offset})
        offset += int(np.size(a))
    return {
        "format": "float64-le",
        "order": "layer-major, kernel-major, row-major",
        "arrays": arrays,
        "spec": {"input_size": bundle.spec.input_size, "n_classes": bundle.spec.n_classes,
                 "layers": [vars(layer) for layer in bundle.spec.layers]},
        "metadata": bundle.metadata,
    }


def save_bundle(bundle: WeightsBundle, bin_path, json_path=None) -> None:
    bin_path = Path(bin_path)
    json_path = Path(json_path) if json_path else bin_path.with_suffix(".json")
    bin_path.write_bytes(bundle_bytes(bundle))
    json_path.write_text(json.dumps(bundle_metadata(bundle), indent=1, sort_keys=True))


def load_bundle(bin_path, json_path=None) -> WeightsBundle:
    bin_path = Path(bin_path)
    json_path = Path(json_path) if json_path else bin_path.with_suffix(".json")
    meta = json.loads(json_path.read_text())
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    expected = sum(int(np.prod(e["shape"])) for e in meta["arrays"])
    if flat.size != expected:
        raise ValueError(f"{bin_path}: {flat.size} values, layout describes {expected}")
    arrays = {}
    for entry in meta["arrays"]:
        size = int(np.prod(entry["shape"]))
        arrays[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    spec = NetworkSpec(tuple(ConvLayerSpec(**layer) for layer in meta["spec"]["layers"]),
                       meta["spec"]["input_size"], meta["spec"]["n_classes"])
    n = len(spec.layers)
    return WeightsBundle(
        spec,
        [arrays[f"conv{l + 1}.weight"] for l in range(n)],
        [arrays[f"conv{l + 1}.bias"] for l in range(n)],
        arrays["fc.weight"],
        arrays["fc.bias"],
        meta.get("metadata", {}),
    )
