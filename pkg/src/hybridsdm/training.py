"""Presence-only training: assume-negative loss, pseudoabsences, Adam and sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import DimensionError, DomainError, ParameterError, TrainingError
from .model import GridConfig, HybridModel, plan_capacity
from .seeding import stream

log = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = (0.01, 0.003, 0.001, 0.0003, 0.0001)


def an_full_loss(pred_obs, species, pred_pseudo, lambda_pos):
    """Assume-negative full loss over observations and matching pseudoabsences.

    For each observation row the observed species counts as a positive
    (weighted by ``lambda_pos``) and every other species as a negative; every
    species is a negative at the pseudoabsence rows. The sum is divided by
    N * S. Returns a differentiable 1x1 Tensor.
    """
    pred_obs, pred_pseudo = T.as_tensor(pred_obs), T.as_tensor(pred_pseudo)
    p, q = pred_obs.values, pred_pseudo.values
    species = np.asarray(species, dtype=np.int64).reshape(-1)
    n, s = p.shape
    if q.shape != p.shape or len(species) != n:
        raise DimensionError(f"loss shapes disagree: obs {p.shape}, pseudo {q.shape}, "
                             f"species {species.shape}")
    if n and (species.min() < 0 or species.max() >= s):
        raise DomainError(f"species index outside [0, {s})")
    if not (np.all((p > 0) & (p < 1)) and np.all((q > 0) & (q < 1))):
        raise DomainError("predictions must lie strictly inside (0, 1)")
    rows = np.arange(n)
    pos = np.zeros_like(p, dtype=bool)
    pos[rows, species] = True
    total = (lambda_pos * np.log(p[rows, species]).sum()
             + np.log1p(-p[~pos]).sum() + np.log1p(-q).sum())
    c = 1.0 / (n * s)

    def back(g):
        g = g[0, 0] * c
        gp = g / (1.0 - p)
        gp[pos] = -g * lambda_pos / p[pos]
        return gp, g / (1.0 - q)

    return T.from_op(np.array([[-c * total]]), (pred_obs, pred_pseudo), back)


def sample_pseudoabsences(n, rng):
    """``n`` locations drawn uniformly from [-1, 1]^2."""
    if n < 1:
        raise ParameterError(f"need n >= 1 pseudoabsences, got {n}")
    return T.Tensor(rng.uniform(-1.0, 1.0, size=(int(n), 2)))


def apply_observation_cap(data, cap, rng):
    """Keep at most ``cap`` randomly chosen records per species (original order preserved)."""
    if cap < 1:
        raise ParameterError(f"observation cap must be >= 1, got {cap}")
    keep = []
    for k in range(data.n_species):
        rows = np.flatnonzero(data.species == k)
        if len(rows) > cap:
            rows = rng.choice(rows, size=cap, replace=False)
        keep.append(rows)
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    return data.take(keep, f"{data.provenance}|cap={cap}")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p.values) for p in params],
                   [np.zeros_like(p.values) for p in params], **kw)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update applied in place to each parameter's values."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape or m.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} vs parameter {p.values.shape} ({p.name})")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    lambda_pos: float = 2048.0
    batch_size: int = 2048
    dropout_p: float = 0.5
    seed: int = 0
    implicitness: float = 0.5
    features: int = 256
    features_per_level: int = None
    r_min: float = 16.0
    r_max: float = 512.0
    table_size: int = 2 ** 14
    wrap_lon: bool = False
    obs_cap: int = None

    def validate(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.lambda_pos > 0:
            raise ParameterError(f"lambda_pos must be positive, got {self.lambda_pos}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.obs_cap is not None and self.obs_cap < 1:
            raise ParameterError(f"obs_cap must be >= 1, got {self.obs_cap}")
        self.plan()
        return self

    def plan(self):
        return plan_capacity(self.implicitness, self.features, self.features_per_level)

    def grid(self):
        return GridConfig(float(self.r_min), float(self.r_max), int(self.table_size), bool(self.wrap_lon))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ParameterError(f"unknown training option(s): {unknown}")
        return cls(**d)

    def config_hash(self):
        """Short digest of every field except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


class MetricsLog:
    """Tab-separated per-epoch log with columns ``epoch``, ``mean_loss``, ``seconds``.

    Losses are written with ``repr`` so identical runs give identical text in
    the first two columns.
    """

    columns = ("epoch", "mean_loss", "seconds")

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records = []
        if self.path is not None:
            self.path.write_text("\t".join(self.columns) + "\n", encoding="utf-8")

    def __call__(self, record):
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(f"{record['epoch']}\t{record['mean_loss']!r}\t{record['seconds']:.6f}\n")

    @staticmethod
    def read(path):
        rows = []
        with Path(path).open(encoding="utf-8") as fh:
            for rec in csv.DictReader(fh, delimiter="\t"):
                rows.append({"epoch": int(rec["epoch"]), "mean_loss": float(rec["mean_loss"]),
                             "seconds": float(rec["seconds"])})
        return rows


def build_model(config, n_species):
    return HybridModel(config.plan(), n_species, config.grid(), config.dropout_p,
                       stream(config.seed, "init"))


def train_model(config, data, sink=None, model=None, max_batches=None):
    """Train and return the live float64 model together with per-epoch loss history.

    ``max_batches`` stops each epoch early; it exists for timing runs.
    """
    config.validate()
    if len(data) == 0:
        raise ParameterError("cannot train on an empty observation set")
    if config.obs_cap is not None:
        data = apply_observation_cap(data, config.obs_cap, stream(config.seed, "cap"))
    model = build_model(config, data.n_species) if model is None else model
    params = model.parameters()
    state = AdamState.for_params(params)
    shuffle_rng = stream(config.seed, "shuffle")
    pseudo_rng = stream(config.seed, "pseudoabsence")
    dropout_rng = stream(config.seed, "dropout")
    history = []
    n = len(data)
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, bs)):
            if max_batches is not None and b >= max_batches:
                break
            rows = order[lo:lo + bs]
            x = data.coords[rows]
            z = sample_pseudoabsences(len(rows), pseudo_rng).values
            # one pass over observations and pseudoabsences stacked together
            probs = model.forward(np.concatenate([x, z]), training=True, rng=dropout_rng)
            k = len(rows)
            pred_obs = _rows(probs, 0, k)
            pred_pseudo = _rows(probs, k, 2 * k)
            loss = an_full_loss(pred_obs, data.species[rows], pred_pseudo, config.lambda_pos)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            for p in params:
                p.grad = None
            T.backward(loss)
            adam_step(params, [p.grad for p in params], state, config.learning_rate)
            losses.append(value)
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                  "seconds": time.perf_counter() - start}
        history.append(record)
        log.debug("epoch %d loss %.6f (%.2fs)", epoch, record["mean_loss"], record["seconds"])
        if sink is not None:
            sink(record)
    model.vocab = data.species_ids
    model.config = config.to_dict()
    return model, history


def _rows(x, lo, hi):
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return (full,)

    return T.from_op(x.values[lo:hi], (x,), back)


def train(config, data, sink=None):
    """Train a fresh model per ``config`` and return its float32 :class:`Checkpoint`."""
    model, history = train_model(config, data, sink)
    return Checkpoint.from_model(model, config.to_dict(), config.seed, data.species_ids,
                                 [h["mean_loss"] for h in history])


# ---------------------------------------------------------------------------
# Sweeps

SWEEP_COLUMNS = ("implicitness", "lr", "obs_cap", "seed", "config_hash", "metric", "value")


@dataclass
class EvalSpec:
    """What to measure after each sweep run.

    ``subsets`` maps a name to species ids; each produces a ``map_<name>``
    metric alongside the overall ``map``.
    """

    rasters: list
    subsets: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    rows: list

    def values(self, metric="map"):
        return [r for r in self.rows if r["metric"] == metric]

    def best(self, metric="map", group_by=("implicitness", "obs_cap"), aggregate="mean"):
        """Best learning rate per group, choosing by the seed-aggregated ``metric``."""
        agg = {"mean": np.mean, "median": np.median}[aggregate]
        by_lr = {}
        for r in self.values(metric):
            if not np.isfinite(r["value"]):
                continue
            key = tuple(r[g] for g in group_by)
            by_lr.setdefault(key, {}).setdefault(r["lr"], []).append(r["value"])
        out = []
        for key in sorted(by_lr, key=lambda k: tuple(-1 if v is None else v for v in k)):
            scored = {lr: float(agg(v)) for lr, v in by_lr[key].items()}
            lr = max(sorted(scored), key=lambda k: scored[k])
            vals = by_lr[key][lr]
            out.append({**dict(zip(group_by, key)), "best_lr": lr, "metric": metric,
                        "value": scored[lr], "std": float(np.std(vals)), "n_seeds": len(vals)})
        return out

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "obs_cap": "" if r["obs_cap"] is None else r["obs_cap"],
                            "value": repr(r["value"])})

    def write_summary(self, path, metric="map", aggregate="mean"):
        best = self.best(metric, aggregate=aggregate)
        cols = ["implicitness", "obs_cap", "best_lr", "metric", "value", "std", "n_seeds"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in best:
                w.writerow({**r, "obs_cap": "" if r["obs_cap"] is None else r["obs_cap"]})
        return best


def run_one(config, data, eval_spec):
    """Train one configuration and return its metric dict (``{"error": msg}`` on failure)."""
    from .evaluation import evaluate_map

    try:
        ckpt = train(config, data)
        model = ckpt.to_model()
        report = evaluate_map(model, eval_spec.rasters)
        metrics = {"map": report.mAP, "final_loss": ckpt.history[-1],
                   "n_parameters": float(model.num_parameters())}
        for name, ids in eval_spec.subsets.items():
            metrics[f"map_{name}"] = report.subset_map(ids)
        return metrics
    except Exception as exc:  # a failed run is recorded, the sweep continues
        log.warning("sweep run failed (%s): %s", config.config_hash(), exc)
        return {"error": f"{type(exc).__name__}: {exc}"}


def _rows_for(config, metrics):
    base = {"implicitness": config.implicitness, "lr": config.learning_rate,
            "obs_cap": config.obs_cap, "seed": config.seed, "config_hash": config.config_hash()}
    if "error" in metrics:
        return [{**base, "metric": "error", "value": float("nan"), "error": metrics["error"]}]
    return [{**base, "metric": k, "value": float(v)} for k, v in metrics.items()]


def sweep(configs, data, eval_spec, jobs=1, progress=None):
    """Train and evaluate every configuration; one output row per (run, metric)."""
    configs = list(configs)
    if not configs:
        raise ParameterError("sweep needs at least one configuration")
    for c in configs:
        c.validate()
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, configs, [data] * len(configs),
                                    [eval_spec] * len(configs)))
    else:
        results = []
        for i, c in enumerate(configs):
            results.append(run_one(c, data, eval_spec))
            if progress is not None:
                progress(i + 1, len(configs), c, results[-1])
    rows = []
    for c, m in zip(configs, results):
        rows.extend(_rows_for(c, m))
    return SweepResult(rows)


def grid_configs(base, implicitness=(0.5,), learning_rates=(1e-3,), obs_caps=(None,), seeds=(0,)):
    """Cross product of the listed settings applied on top of ``base``."""
    out = []
    for imp in implicitness:
        for cap in obs_caps:
            for lr in learning_rates:
                for seed in seeds:
                    out.append(replace(base, implicitness=float(imp), learning_rate=float(lr),
                                       obs_cap=cap, seed=int(seed)))
    return out
