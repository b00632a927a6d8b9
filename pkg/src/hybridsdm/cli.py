"""Command-line entry point: ``hybridsdm {train,eval,sweep,export,synth}``.

Configuration files are YAML or JSON with these top-level sections::

    data:   {observations: obs.csv, rasters: rasters/, columns: {lat, lon, species},
             synthetic: {n_blob, n_sharp, obs_per_species, seed, spec}}
    train:  any TrainConfig field (epochs, learning_rate, implicitness, ...)
    eval:   {metrics: [map, prc, r2, timing], recall_points, env, subsets, repetitions}
    sweep:  {implicitness: [...], learning_rates: [...], obs_caps: [...], seeds: [...]}
    out_dir: path

``--set section.key=value`` overrides any entry (values parsed as YAML).
Exit codes: 0 success, 1 invalid configuration, 2 runtime failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, HybridSDMError, ParameterError
from .evaluation import (benchmark_timing, evaluate_map, export_embedding_grid, precision_recall_curve,
                         probe_r2, write_prc, write_timing)
from .seeding import stream
from .training import EvalSpec, MetricsLog, TrainConfig, build_model, grid_configs, sweep, train

log = logging.getLogger("hybridsdm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "HYBRIDSDM_OUTPUT_ROOT"
METRICS = ("map", "prc", "r2", "timing")

SECTIONS = {
    "data": {"observations", "rasters", "columns", "synthetic"},
    "train": set(TrainConfig.__dataclass_fields__),
    "eval": {"metrics", "recall_points", "env", "subsets", "repetitions", "probe_points"},
    "sweep": {"implicitness", "learning_rates", "obs_caps", "seeds"},
}
SYNTHETIC_KEYS = {"n_blob", "n_sharp", "obs_per_species", "seed", "spec", "raster_shape"}
COLUMN_KEYS = {"lat", "lon", "species"}


class ConfigError(ParameterError):
    pass


class _Fail(Exception):
    def __init__(self, code, kind, message, detail=""):
        super().__init__(message)
        self.code, self.kind, self.detail = code, kind, detail


# ---------------------------------------------------------------------------
# Configuration

def _set_dotted(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=(), base_dir=None):
    """Read a config file, apply ``key=value`` overrides and validate every key."""
    cfg = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise _Fail(EXIT_IO, "io", f"cannot read config {path}", str(exc))
        try:
            cfg = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON ({exc})")
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.parent
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key.strip(), yaml.safe_load(raw))
    validate_config(cfg)
    cfg["_base_dir"] = str(base_dir or Path.cwd())
    return cfg


def validate_config(cfg):
    unknown = sorted(set(cfg) - set(SECTIONS) - {"out_dir", "_base_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    for section, allowed in SECTIONS.items():
        body = cfg.get(section, {}) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = sorted(set(body) - allowed)
        if bad:
            raise ConfigError(f"unknown key(s) in {section!r}: {bad}")
    data = cfg.get("data", {}) or {}
    if "synthetic" in data and data["synthetic"] is not None:
        bad = sorted(set(data["synthetic"]) - SYNTHETIC_KEYS)
        if bad:
            raise ConfigError(f"unknown key(s) in data.synthetic: {bad}")
    if "columns" in data:
        bad = sorted(set(data["columns"]) - COLUMN_KEYS)
        if bad:
            raise ConfigError(f"unknown key(s) in data.columns: {bad}")
    metrics = (cfg.get("eval", {}) or {}).get("metrics")
    if metrics is not None:
        _parse_metrics(metrics)
    train_config(cfg).validate()
    sw = cfg.get("sweep", {}) or {}
    for key, val in sw.items():
        if not isinstance(val, list) or not val:
            raise ConfigError(f"sweep.{key} must be a non-empty list")
    for imp in sw.get("implicitness", []):
        replace(train_config(cfg), implicitness=float(imp)).validate()


def train_config(cfg):
    return TrainConfig.from_dict(dict(cfg.get("train", {}) or {}))


def _parse_metrics(metrics):
    items = metrics.split(",") if isinstance(metrics, str) else list(metrics)
    items = [m.strip() for m in items if m.strip()]
    bad = sorted(set(items) - set(METRICS))
    if bad or not items:
        raise ConfigError(f"unknown metric(s) {bad}; choose from {list(METRICS)}")
    return items


def _resolve(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def _require_file(path, what):
    if not Path(path).exists():
        raise _Fail(EXIT_IO, "io", f"{what} not found: {path}", f"path={path}")


def load_data(cfg):
    """Observations and (possibly empty) rasters described by the ``data`` section."""
    data = cfg.get("data", {}) or {}
    syn = data.get("synthetic")
    if data.get("observations"):
        path = _resolve(cfg, data["observations"])
        _require_file(path, "observation file")
        cols = data.get("columns", {}) or {}
        obs = D.load_observations(path, cols.get("lat", "lat"), cols.get("lon", "lon"),
                                  cols.get("species", "taxon_id"))
        rasters = []
        if data.get("rasters"):
            rpath = _resolve(cfg, data["rasters"])
            _require_file(rpath, "raster path")
            rasters = D.read_rasters(rpath)
        return obs, rasters, None
    if syn is not None:
        spec = synthetic_spec(cfg, syn)
        obs, rasters = D.generate_synthetic(spec, stream(int(syn.get("seed", 0)), "data"))
        return obs, rasters, spec
    raise ConfigError("config needs data.observations or data.synthetic")


def synthetic_spec(cfg, syn):
    if syn.get("spec"):
        path = _resolve(cfg, syn["spec"])
        _require_file(path, "synthetic spec")
        return D.SyntheticSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    return D.default_synthetic_spec(int(syn.get("n_blob", 10)), int(syn.get("n_sharp", 10)),
                                    int(syn.get("obs_per_species", 500)), int(syn.get("seed", 0)),
                                    tuple(syn.get("raster_shape", (100, 100))))


def _check_inputs(cfg):
    """Fail on missing input files before any computation starts."""
    data = cfg.get("data", {}) or {}
    if data.get("observations"):
        _require_file(_resolve(cfg, data["observations"]), "observation file")
    if data.get("rasters"):
        _require_file(_resolve(cfg, data["rasters"]), "raster path")
    syn = data.get("synthetic") or {}
    if syn.get("spec"):
        _require_file(_resolve(cfg, syn["spec"]), "synthetic spec")
    env = (cfg.get("eval", {}) or {}).get("env")
    if env:
        _require_file(_resolve(cfg, env), "environment file")
    if not data.get("observations") and data.get("synthetic") is None:
        raise ConfigError("config needs data.observations or data.synthetic")


def out_dir(cfg, flag, command):
    chosen = flag or cfg.get("out_dir")
    if chosen is None:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        chosen = root / f"{command}-{train_config(cfg).config_hash()}-seed{train_config(cfg).seed}"
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo(cfg):
    return {k: v for k, v in cfg.items() if k != "_base_dir"}


def _subset_ids(cfg, spec):
    subsets = dict((cfg.get("eval", {}) or {}).get("subsets", {}) or {})
    if spec is not None:
        for family in sorted({s.family for s in spec.species}):
            subsets.setdefault(family, [s.name for s in spec.species if s.family == family])
    return subsets


# ---------------------------------------------------------------------------
# Commands

def cmd_train(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        _set_dotted(cfg, "train.seed", args.seed)
    _check_inputs(cfg)
    tc = train_config(cfg).validate()
    obs, _, _ = load_data(cfg)
    out = out_dir(cfg, args.out_dir, "train")
    sink = MetricsLog(out / "metrics.tsv")
    ckpt = train(tc, obs, sink)
    save_checkpoint(ckpt, out / "model.ckpt")
    (out / "config.json").write_text(json.dumps(_echo(cfg), indent=2, sort_keys=True), encoding="utf-8")
    print(f"trained {ckpt.plan} -> {out / 'model.ckpt'}")
    return EXIT_OK


def _env_targets(cfg, env_path, n_points, seed):
    """Probe coordinates and named target fields.

    Without an environment file the synthetic 32 x 32 checkerboard is probed
    at uniformly drawn points.
    """
    if env_path:
        path = _resolve(cfg, env_path)
        _require_file(path, "environment file")
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"lat", "lon"} <= set(rows[0]):
            raise ConfigError(f"{path}: environment CSV needs lat, lon and value columns")
        names = [k for k in rows[0] if k not in ("lat", "lon")]
        coords = np.array([[float(r["lat"]) / 90.0, float(r["lon"]) / 180.0] for r in rows])
        return coords, {n: np.array([float(r[n]) for r in rows]) for n in names}
    coords = stream(seed, "probe").uniform(-1.0, 1.0, size=(n_points, 2))
    return coords, {"checkerboard32": D.checkerboard_field(coords, 32)}


def cmd_eval(args):
    cfg = load_config(args.config, args.set) if args.config or args.set else {"_base_dir": os.getcwd()}
    ev = cfg.get("eval", {}) or {}
    metrics = _parse_metrics(args.metrics or ev.get("metrics") or "map")
    ckpt_path = Path(args.checkpoint)
    _require_file(ckpt_path, "checkpoint")
    model = load_checkpoint(ckpt_path)
    rasters = []
    if {"map", "prc", "timing"} & set(metrics):
        rpath = args.rasters or (cfg.get("data", {}) or {}).get("rasters")
        if not rpath:
            raise ConfigError("--rasters is required for map/prc/timing metrics")
        rpath = Path(rpath) if args.rasters else _resolve(cfg, rpath)
        _require_file(rpath, "raster path")
        rasters = D.read_rasters(rpath)
    out = Path(args.out_dir or cfg.get("out_dir") or ckpt_path.parent)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"checkpoint": str(ckpt_path), "model_config": model.config, "plan": model.plan.to_dict()}
    if "map" in metrics:
        report = evaluate_map(model, rasters, echo)
        report.write(out)
        for sid in sorted(report.skipped):
            print(f"warning: skipped species {sid}: {report.skipped[sid]}", file=sys.stderr)
        print(f"mAP {report.mAP:.6f} over {len(report.ap)} species")
    if "prc" in metrics:
        grid, prec = precision_recall_curve(model, rasters, int(ev.get("recall_points", 101)))
        write_prc(out / "prc.csv", grid, prec, config=echo)
    if "r2" in metrics:
        coords, fields = _env_targets(cfg, ev.get("env"), int(ev.get("probe_points", 8000)),
                                      int((model.config or {}).get("seed", 0)))
        emb = model.embed_array(coords)
        with (out / "r2.csv").open("w", newline="", encoding="utf-8") as fh:
            fh.write("# config: " + json.dumps(echo, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(["field", "r2"])
            scores = []
            for name, y in fields.items():
                scores.append(probe_r2(emb, y))
                w.writerow([name, repr(scores[-1])])
            w.writerow(["mean", repr(float(np.mean(scores)))])
    if "timing" in metrics:
        coords = np.concatenate([r.centers for r in rasters])
        reps = int(ev.get("repetitions", 5))
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model.predict(coords)
            times.append(time.perf_counter() - t0)
        with (out / "timing.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["implicitness", "repetitions", "infer_mean", "infer_std", "n_points"])
            w.writerow([model.plan.implicitness, reps, np.mean(times), np.std(times), len(coords)])
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        _set_dotted(cfg, "train.seed", args.seed)
    _check_inputs(cfg)
    base = train_config(cfg).validate()
    sw = cfg.get("sweep", {}) or {}
    configs = grid_configs(base, sw.get("implicitness", [base.implicitness]),
                           sw.get("learning_rates", [base.learning_rate]),
                           sw.get("obs_caps", [base.obs_cap]), sw.get("seeds", [base.seed]))
    for c in configs:
        c.validate()
    obs, rasters, spec = load_data(cfg)
    if not rasters:
        raise ConfigError("sweep needs evaluation rasters (data.rasters or data.synthetic)")
    out = out_dir(cfg, args.out_dir, "sweep")
    plans = {}
    for c in configs:
        plans.setdefault(c.implicitness, c)
    with (out / "plans.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["implicitness", "F", "F_i", "L", "M", "n_parameters"])
        for imp, c in sorted(plans.items()):
            p = c.plan()
            n_params = build_model(c, obs.n_species).num_parameters()
            w.writerow([imp, p.F, p.F_i, p.L, p.M, n_params])
            log.info("plan implicitness=%s F_i=%d L=%d M=%d parameters=%d", imp, p.F_i, p.L, p.M, n_params)

    def progress(i, n, c, m):
        status = "failed" if "error" in m else f"mAP {m['map']:.4f}"
        print(f"[{i}/{n}] implicitness={c.implicitness} lr={c.learning_rate} "
              f"cap={c.obs_cap} seed={c.seed}: {status}", flush=True)

    result = sweep(configs, obs, EvalSpec(rasters, _subset_ids(cfg, spec)), jobs=args.jobs,
                   progress=progress)
    result.write_csv(out / "sweep.csv")
    result.write_summary(out / "summary.csv")
    (out / "config.json").write_text(json.dumps(_echo(cfg), indent=2, sort_keys=True), encoding="utf-8")
    n_fail = sum(1 for r in result.rows if r["metric"] == "error")
    if n_fail == len(configs):
        raise _Fail(EXIT_RUNTIME, "runtime", "every sweep run failed",
                    "; ".join(sorted({r["error"] for r in result.rows if "error" in r})))
    if n_fail:
        print(f"warning: {n_fail} of {len(configs)} runs failed", file=sys.stderr)
    return EXIT_OK


def _parse_dims(text):
    try:
        parts = [int(x) for x in text.lower().replace(",", "x").split("x")]
    except ValueError:
        raise ConfigError(f"--dims expects ROWSxCOLS, got {text!r}")
    if len(parts) != 2 or min(parts) < 1:
        raise ConfigError(f"--dims expects two positive integers, got {text!r}")
    return tuple(parts)


def cmd_export(args):
    dims = _parse_dims(args.dims)
    _require_file(args.checkpoint, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    export_embedding_grid(model, dims, path)
    print(f"wrote {dims[0]}x{dims[1]}x{model.plan.F} embedding grid to {path}")
    return EXIT_OK


def cmd_synth(args):
    cfg = load_config(args.config, args.set) if args.config or args.set else {"_base_dir": os.getcwd()}
    syn = dict((cfg.get("data", {}) or {}).get("synthetic") or {})
    if args.seed is not None:
        syn["seed"] = args.seed
    spec = synthetic_spec(cfg, syn)
    seed = int(syn.get("seed", 0))
    obs, rasters = D.generate_synthetic(spec, stream(seed, "data"))
    out = Path(args.out_dir or cfg.get("out_dir") or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    D.write_observations(obs, out / "observations.csv")
    D.write_rasters(rasters, out / "rasters")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    print(f"wrote {len(obs)} observations of {obs.n_species} species to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hybridsdm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="YAML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.learning_rate=0.003")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out-dir", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")

    p = sub.add_parser("train", help="train one model")
    common(p, True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rasters", help="raster file, directory of .raster files or reference .npy")
    p.add_argument("--metrics", help="comma-separated subset of " + ",".join(METRICS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate a grid of configurations")
    common(p, True)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="export an embedding grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dims", default="100x100", help="ROWSxCOLS")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="write a synthetic observation set and its rasters")
    common(p, False)
    p.set_defaults(func=cmd_synth)
    return parser


def _report(kind, message, detail=""):
    print(f"error: kind={kind} message={json.dumps(str(message))}", file=sys.stderr)
    if detail:
        print(detail, file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        _report(exc.kind, exc, exc.detail)
        return exc.code
    except CheckpointError as exc:
        _report("io", exc)
        return EXIT_IO
    except (ParameterError, D.IngestionError) as exc:
        _report("validation", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        _report("io", exc, getattr(exc, "filename", "") or "")
        return EXIT_IO
    except (HybridSDMError, ValueError, RuntimeError) as exc:
        _report("runtime", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
