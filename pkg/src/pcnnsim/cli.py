"""Command-line entry point: ``pcnnsim {train,simulate,sweep,report}``.

Every command writes its results plus a ``manifest_<command>.json`` into
``--out``.  Files are staged under temporary names and renamed only once the
whole command has succeeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import network as nw
from .devices import critically_coupled
from .mnist import IdxFormatError, load_mnist
from .ocu import DEFAULT_FINESSE, OcuConfig

EXIT_OK, EXIT_USAGE, EXIT_COMPUTE = 0, 2, 3


class UsageError(Exception):
    pass


# -- argument parsing -------------------------------------------------------

def parse_list(text: str, kind=float) -> list:
    """Comma list and/or inclusive ranges ``a..b[:step]``."""
    out = []
    for part in (p.strip() for p in str(text).split(",")):
        if not part:
            continue
        if ".." in part:
            out.extend(parse_range(part, kind))
        else:
            out.append(kind(float(part)) if kind is int else kind(part))
    if not out:
        raise UsageError(f"empty list {text!r}")
    return out


def parse_range(text: str, kind=float, default_step=None) -> list:
    body, _, step = text.partition(":")
    lo, _, hi = body.partition("..")
    a, b = float(lo), float(hi)
    if step:
        s = float(step)
    elif default_step is not None:
        s = float(default_step)
    else:
        s = 1.0
    if s <= 0 or b < a:
        raise UsageError(f"bad range {text!r}")
    n = int(np.floor((b - a) / s + 1e-9)) + 1
    vals = a + s * np.arange(n)
    return [kind(round(v)) if kind is int else kind(v) for v in vals]


def _env_seed() -> int:
    raw = os.environ.get("PCNN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"PCNN_SEED must be an integer, got {raw!r}") from None


# option name -> built-in default; CLI flags default to None so the config
# file can fill anything not given explicitly
DEFAULTS = {
    "train": {"data": None, "epochs": 10, "lr": 0.02, "batch_size": 32,
              "train_samples": None, "weights": "weights.bin"},
    "simulate": {"weights": "weights.bin", "data": None, "samples": 200, "ideal": False,
                 "mesh": None},
    "sweep": {"weights": "weights.bin", "data": None, "kind": None,
              "bauds": "5e9,10e9,15e9,20e9,25e9", "images": 10, "samples": 200,
              "trials": 10, "finesse": "100,150,200,250", "bits": "6,8,10,12",
              "dump_errors": False},
    "report": {"bauds": "5e9..25e9", "mesh": "4x4", "t_c": 0.0, "memory": False,
               "m": "5..100", "n": 3},
}
OCU_DEFAULTS = {
    "baud": 10e9, "oversampling": 16, "sigma": 0.5, "adc_bits": 10, "dac_bits": 10,
    "v_max": 1.2, "filter": True, "noise_std": 0.0, "finesse": DEFAULT_FINESSE,
    "mapping_mode": "full-range", "delay_source": "ideal", "delta_lambda": 0.2,
    "dispersion": -150.0, "delay_error_std": 0.0, "circuit_delay": 0.0,
}


def _add_ocu_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("OCU")
    g.add_argument("--baud", type=float)
    g.add_argument("--oversampling", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--adc-bits", type=int)
    g.add_argument("--dac-bits", type=int)
    g.add_argument("--v-max", type=float)
    g.add_argument("--filter", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--noise-std", type=float)
    g.add_argument("--finesse", type=str, help="ring finesse (sweep: list)")
    g.add_argument("--mapping-mode", choices=["full-range", "quasi-linear"])
    g.add_argument("--delay-source", choices=["ideal", "dispersion", "arrayed"])
    g.add_argument("--delta-lambda", type=float)
    g.add_argument("--dispersion", type=float)
    g.add_argument("--delay-error-std", type=float)
    g.add_argument("--circuit-delay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcnnsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of option defaults")
    common.add_argument("--seed", type=int, help="master seed (default: $PCNN_SEED or 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the reference CNN")
    p.add_argument("--data", type=Path, help="directory holding MNIST IDX files")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-samples", type=int)
    p.add_argument("--weights", type=str, help="output file name")

    p = sub.add_parser("simulate", parents=[common], help="evaluate the photonic network")
    p.add_argument("--weights", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--samples", type=int)
    p.add_argument("--ideal", action="store_true", default=None,
                   help="filter off, 16-bit converters")
    p.add_argument("--mesh", type=str, help="weight-bank mesh, e.g. 4x4")
    _add_ocu_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="baud or finesse x ADC sweeps")
    p.add_argument("--kind", type=str, help="baud | finesse-adc")
    p.add_argument("--weights", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--bauds", type=str)
    p.add_argument("--images", type=int, help="images for error extraction")
    p.add_argument("--samples", type=int, help="evaluation samples")
    p.add_argument("--trials", type=int)
    p.add_argument("--bits", type=str)
    p.add_argument("--dump-errors", action="store_true", default=None)
    _add_ocu_flags(p)

    p = sub.add_parser("report", parents=[common], help="throughput and memory tables")
    p.add_argument("--bauds", type=str)
    p.add_argument("--mesh", type=str)
    p.add_argument("--t-c", type=float)
    p.add_argument("--memory", action="store_true", default=None)
    p.add_argument("--m", type=str)
    p.add_argument("--n", type=int)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """CLI flags > config file > built-in defaults."""
    opts = dict(DEFAULTS[args.command])
    if args.command in ("simulate", "sweep"):
        opts.update(OCU_DEFAULTS)
    if args.command == "sweep":
        # list-valued here; a baud sweep uses its first entry
        opts["finesse"] = DEFAULTS["sweep"]["finesse"]
    if args.config is not None:
        try:
            file_opts = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_opts, dict):
            raise UsageError("config file must hold a JSON object")
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        unknown = set(file_opts) - set(opts) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(file_opts)
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    if args.seed is not None:
        opts["seed"] = args.seed
    elif "seed" not in opts:
        opts["seed"] = _env_seed()
    opts["jobs"] = max(1, int(args.jobs))
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in opts.items()}


def ocu_config(opts: dict) -> OcuConfig:
    finesse = opts["finesse"]
    if isinstance(finesse, str):
        finesse = parse_list(finesse)[0]
    cfg = OcuConfig(
        baud=float(opts["baud"]), oversampling=int(opts["oversampling"]),
        sigma=float(opts["sigma"]), adc_bits=int(opts["adc_bits"]),
        dac_bits=int(opts["dac_bits"]), v_max=float(opts["v_max"]),
        filter_enabled=bool(opts["filter"]), noise_std=float(opts["noise_std"]),
        mrr=critically_coupled(float(finesse)), mapping_mode=opts["mapping_mode"],
        delay_source=opts["delay_source"], delta_lambda=float(opts["delta_lambda"]),
        dispersion=float(opts["dispersion"]), delay_error_std=float(opts["delay_error_std"]),
        circuit_delay=float(opts["circuit_delay"]),
    )
    if opts.get("ideal"):
        cfg = cfg.replace(filter_enabled=False, noise_std=0.0, adc_bits=16, dac_bits=16)
    cfg.database  # validate converter settings before any heavy work
    return cfg


# -- outputs ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(vars(self), indent=1, sort_keys=True) + "\n"


class Outputs:
    """Files staged in memory and committed together with temp-file + rename."""

    def __init__(self, directory: Path, manifest: RunManifest) -> None:
        self.dir = Path(directory)
        self.manifest = manifest
        self.manifest_name = f"manifest_{manifest.command}.json"
        self.files: dict[str, bytes] = {}

    def add(self, name: str, content: str | bytes) -> None:
        data = content.encode("utf-8") if isinstance(content, str) else content
        self.files[name] = data
        self.manifest.outputs[name] = hashlib.sha256(data).hexdigest()

    def add_json(self, name: str, obj) -> None:
        obj = dict(obj, manifest=self.manifest_name)
        self.add(name, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def commit(self) -> list[Path]:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files[self.manifest_name] = self.manifest.to_json().encode("utf-8")
        staged = []
        try:
            for name, data in self.files.items():
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                staged.append((tmp, self.dir / name))
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]


def _matrix_csv(m: np.ndarray) -> str:
    header = "true\\pred," + ",".join(str(j) for j in range(m.shape[1]))
    lines = [header] + [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(m)]
    return "\n".join(lines) + "\n"


def _load_split(data, split: str, manifest: RunManifest):
    if data is None:
        raise UsageError("--data is required")
    root = Path(data)
    images, labels = load_mnist(root, split)
    for f in sorted(root.iterdir()):
        if f.is_file() and "idx" in f.name:
            manifest.inputs[str(f)] = sha256_file(f)
    return images, labels


def _test_subset(images, labels, n: int, seed: int):
    if n < 1:
        raise UsageError("sample count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 200]))
    idx = np.sort(rng.choice(len(images), size=min(n, len(images)), replace=False))
    return images[idx], labels[idx], idx


def _load_weights(path, manifest: RunManifest) -> nw.WeightsBundle:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"weights file {path} not found")
    manifest.inputs[str(path)] = sha256_file(path)
    side = path.with_suffix(".json")
    if side.exists():
        manifest.inputs[str(side)] = sha256_file(side)
    return nw.load_bundle(path)


# -- commands ---------------------------------------------------------------

def cmd_train(opts: dict, out: Outputs) -> None:
    images, labels = _load_split(opts["data"], "train", out.manifest)
    if opts["train_samples"]:
        images, labels = images[: opts["train_samples"]], labels[: opts["train_samples"]]
    bundle = nw.train_reference(
        images, labels, epochs=int(opts["epochs"]), seed=int(opts["seed"]),
        lr=float(opts["lr"]), batch_size=int(opts["batch_size"]),
    )
    name = Path(opts["weights"]).name
    out.add(name, nw.bundle_bytes(bundle))
    out.add_json(Path(name).with_suffix(".json").name, nw.bundle_metadata(bundle))
    print(f"train accuracy {bundle.metadata['final_train_accuracy']:.4f} -> {name}")


def cmd_simulate(opts: dict, out: Outputs) -> None:
    cfg = ocu_config(opts)
    mesh = nw.MeshSpec.parse(opts["mesh"]) if opts["mesh"] else None
    bundle = _load_weights(opts["weights"], out.manifest)
    images, labels = _load_split(opts["data"], "test", out.manifest)
    images, labels, idx = _test_subset(images, labels, int(opts["samples"]), int(opts["seed"]))
    ref = nw.evaluate(images, labels, bundle)
    pho = nw.evaluate(images, labels, bundle, cfg, mesh, seed=int(opts["seed"]), jobs=opts["jobs"])
    agreement = float(np.mean(ref["predictions"] == pho["predictions"]))
    timing = an.throughput_table(bundle.spec, [cfg.baud], mesh)[0].row()
    out.add_json("simulate.json", {
        "accuracy": pho["accuracy"], "reference_accuracy": ref["accuracy"],
        "agreement": agreement, "samples": int(len(labels)), "baud": cfg.baud,
        "timing": timing,
    })
    out.add("confusion.csv", _matrix_csv(pho["confusion"]))
    out.add("predictions.csv", an.rows_to_csv([
        {"index": int(i), "label": int(l), "photonic": int(p), "reference": int(r)}
        for i, l, p, r in zip(idx, labels, pho["predictions"], ref["predictions"])
    ]))
    print(f"photonic accuracy {pho['accuracy']:.4f}  reference {ref['accuracy']:.4f}  "
          f"agreement {agreement:.4f}")


def cmd_sweep(opts: dict, out: Outputs) -> None:
    kind = opts["kind"]
    if kind not in ("baud", "finesse-adc"):
        raise UsageError(f"unknown sweep kind {kind!r} (baud | finesse-adc)")
    seed = int(opts["seed"])
    bundle = _load_weights(opts["weights"], out.manifest)
    test_x, test_y = _load_split(opts["data"], "test", out.manifest)
    ev_x, ev_y, idx = _test_subset(test_x, test_y, int(opts["samples"]), seed)
    if kind == "baud":
        bauds = parse_list(opts["bauds"])
        n_img = int(opts["images"])
        if n_img < 1:
            raise UsageError("--images must be >= 1")
        pool = np.setdiff1d(np.arange(len(test_x)), idx)
        err_x = test_x[pool[:n_img]]
        cfg = ocu_config(opts)
        stats = an.baud_sweep(bauds, err_x, bundle, cfg, eval_images=ev_x, eval_labels=ev_y,
                              trials=int(opts["trials"]), seed=seed, jobs=opts["jobs"])
        rows = an.error_stats_rows(stats)
        if opts["dump_errors"]:
            out.add("sweep_baud_errors.csv", an.rows_to_csv([
                {"baud": s.baud, "sample": k, "error": float(e)}
                for s in stats for k, e in enumerate(s.samples)
            ]))
    else:
        finesses = parse_list(opts["finesse"])
        bits = parse_list(opts["bits"], int)
        rows = an.precision_sweep(finesses, bits, opts["mapping_mode"], ev_x, ev_y, bundle,
                                  v_max=float(opts["v_max"]))
    stem = f"sweep_{kind.replace('-', '_')}"
    out.add(stem + ".csv", an.rows_to_csv(rows))
    out.add_json(stem + ".json", {"rows": rows})
    print(an.rows_to_csv(rows), end="")


def cmd_report(opts: dict, out: Outputs) -> None:
    spec = nw.default_spec()
    bauds = (parse_range(opts["bauds"], float, default_step=5e9)
             if ".." in str(opts["bauds"]) and "," not in str(opts["bauds"])
             else parse_list(opts["bauds"]))
    t_c = float(opts["t_c"])
    ops = an.op_count(spec)
    t1 = [r.row() for r in an.throughput_table(spec, bauds, None, t_c)]
    for r in t1:
        ref = an.REFERENCE_SERIAL.get(r["baud"])
        r["reference_conv_speed_ops_per_s"] = ref["speed_2dconv"] if ref else ""
    out.add("throughput_serial.csv", an.rows_to_csv(t1))
    tables = {"ops": ops, "serial": t1}
    if opts["mesh"]:
        mesh = nw.MeshSpec.parse(opts["mesh"])
        t2 = [r.row() for r in an.throughput_table(spec, bauds, mesh, t_c)]
        for r in t2:
            ref = an.REFERENCE_MESH.get(r["baud"])
            r["reference_full_utilization_speed_ops_per_s"] = ref["speed_full"] if ref else ""
        out.add("throughput_mesh.csv", an.rows_to_csv(t2))
        tables["mesh"] = t2
    if opts["memory"]:
        n = int(opts["n"])
        ms = parse_list(opts["m"], int)
        if any(m <= n for m in ms):
            raise UsageError("every M must exceed N")
        mem = [dict(m_size=m, n_size=n, **an.memory_model(m, n)) for m in ms]
        out.add("memory.csv", an.rows_to_csv(mem))
        tables["memory"] = mem
    out.add_json("report.json", tables)
    print(f"ops,{ops}")
    for r in t1:
        print(f"baud {r['baud']:.3g}: total {r['total_time_s'] * 1e9:.1f} ns, "
              f"{r['speed_ops_per_s'] / 1e9:.1f} GOPS")


COMMANDS = {"train": cmd_train, "simulate": cmd_simulate, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    t0 = time.time()
    try:
        opts = resolve_options(args)
        manifest = RunManifest(args.command, opts, int(opts["seed"]))
        out = Outputs(args.out, manifest)
        COMMANDS[args.command](opts, out)
        manifest.timings = {"wall_clock_s": time.time() - t0,
                            "started_unix": t0}
        out.commit()
    except nw.TrainingFailedError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (UsageError, IdxFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
