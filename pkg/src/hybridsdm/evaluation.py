"""Range-map benchmarking, PR curves, environmental probing, timing and exports."""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParameterError, UndefinedMetricError
from .seeding import stream

log = logging.getLogger(__name__)

EMBEDDING_FORMAT = "hybridsdm-embedding"


def average_precision(scores, labels):
    """Mean over positives of the precision at that positive's rank.

    Items are ranked by descending score; ties keep their original order.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ParameterError(f"{len(scores)} scores but {len(labels)} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")
    ranked = labels[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return float(np.mean(hits[ranked] / ranks))


def precision_recall(scores, labels):
    """Precision and recall after each rank (stable descending order)."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision-recall is undefined without positive labels")
    ranked = labels[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    return hits / np.arange(1, len(ranked) + 1), hits / n_pos


def interpolated_precision(scores, labels, recall_grid):
    """Monotone-envelope precision: the best precision at recall >= r, for each r."""
    precision, recall = precision_recall(scores, labels)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, np.asarray(recall_grid, dtype=float) - 1e-12, side="left")
    out = np.zeros(len(pos))
    ok = pos < len(envelope)
    out[ok] = envelope[pos[ok]]
    return out


@dataclass
class EvalReport:
    species_ids: list
    ap: np.ndarray
    skipped: dict = field(default_factory=dict)
    recall_grid: np.ndarray = None
    mean_precision: np.ndarray = None
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def mAP(self):
        return float(np.mean(self.ap)) if len(self.ap) else float("nan")

    def subset_map(self, species_ids):
        wanted = set(map(str, species_ids))
        vals = [a for s, a in zip(self.species_ids, self.ap) if s in wanted]
        return float(np.mean(vals)) if vals else float("nan")

    def write(self, directory, prefix="map"):
        """Write ``<prefix>_per_species.csv`` and ``<prefix>_summary.csv``."""
        directory = Path(directory)
        echo = "# config: " + json.dumps(self.config, sort_keys=True) + "\n"
        with (directory / f"{prefix}_per_species.csv").open("w", newline="", encoding="utf-8") as fh:
            fh.write(echo)
            w = csv.writer(fh)
            w.writerow(["species_index", "species_id", "ap"])
            for i, (s, a) in enumerate(zip(self.species_ids, self.ap)):
                w.writerow([i, s, repr(float(a))])
        with (directory / f"{prefix}_summary.csv").open("w", newline="", encoding="utf-8") as fh:
            fh.write(echo)
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["map", repr(self.mAP)])
            w.writerow(["n_evaluated", len(self.ap)])
            w.writerow(["n_skipped", len(self.skipped)])
            for sid, why in sorted(self.skipped.items()):
                w.writerow([f"skipped:{sid}", why])


def _match_species(model, rasters):
    """Pair each raster with a model output column; report the rest."""
    if not rasters:
        raise ParameterError("no rasters to evaluate")
    vocab = getattr(model, "vocab", None)
    index = {str(s): i for i, s in enumerate(vocab)} if vocab else None
    pairs, skipped = [], {}
    for r in rasters:
        if index is not None:
            col = index.get(str(r.species_id))
        else:
            try:
                col = int(r.species_id)
            except ValueError:
                col = None
        if col is None or not 0 <= col < model.n_species:
            skipped[str(r.species_id)] = "species not in model vocabulary"
        elif r.n_positive == 0:
            skipped[str(r.species_id)] = "no positive cells"
        else:
            pairs.append((r, col))
    return pairs, skipped


def _score_rasters(model, pairs):
    """Predict once per distinct set of evaluation cells (grid rasters usually share one)."""
    cache = {}
    for r, col in pairs:
        key = (r.centers.shape, hash(r.centers.tobytes()))
        if key not in cache:
            cache[key] = model.predict(r.centers)
        yield r, col, cache[key][:, col]


def evaluate_map(model, rasters, config=None):
    """Per-species AP of the model's scores at each raster's valid cells, and their mean."""
    pairs, skipped = _match_species(model, rasters)
    ids, aps = [], []
    for r, col, scores in _score_rasters(model, pairs):
        ids.append(str(r.species_id))
        aps.append(average_precision(scores, r.labels))
    if skipped:
        log.warning("skipped %d species: %s", len(skipped), sorted(skipped))
    return EvalReport(ids, np.array(aps), skipped,
                      config=dict(config if config is not None else getattr(model, "config", {}) or {}))


def precision_recall_curve(model, rasters, recall_grid=101):
    """Recall grid and species-averaged interpolated precision at each level."""
    grid = np.linspace(0.0, 1.0, recall_grid) if np.isscalar(recall_grid) else np.asarray(recall_grid)
    pairs, skipped = _match_species(model, rasters)
    curves = [interpolated_precision(scores, r.labels, grid)
              for r, _, scores in _score_rasters(model, pairs)]
    if not curves:
        raise UndefinedMetricError("no species could be evaluated")
    return grid, np.mean(curves, axis=0)


def write_prc(path, recall, mean_precision, reference=None, config=None):
    """CSV of (recall, mean_precision[, ratio_to_reference])."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("# config: " + json.dumps(config or {}, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["recall", "mean_precision"] + (["ratio_to_implicit"] if reference is not None else []))
        for i, (r, p) in enumerate(zip(recall, mean_precision)):
            row = [repr(float(r)), repr(float(p))]
            if reference is not None:
                row.append(repr(float(p / reference[i])) if reference[i] > 0 else "nan")
            w.writerow(row)


def probe_r2(embeddings, target, ridge=1e-6, train_fraction=0.5, seed=0):
    """Held-out R^2 of a ridge-damped least-squares fit of ``target`` on ``embeddings``.

    The intercept is unpenalized. The ridge term is ``ridge`` times the mean
    diagonal of the centred Gram matrix, so it is scale-free. The result is
    clamped to [-1, 1].
    """
    X = np.asarray(getattr(embeddings, "values", embeddings), dtype=float)
    y = np.asarray(target, dtype=float).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise ParameterError(f"embeddings {X.shape} and target {y.shape} disagree")
    if np.var(y) == 0:
        warnings.warn("target has zero variance; R^2 reported as 0", RuntimeWarning)
        return 0.0
    rng = stream(seed, "probe")
    perm = rng.permutation(len(y))
    n_train = int(round(train_fraction * len(y)))
    tr, te = perm[:n_train], perm[n_train:]
    if n_train <= X.shape[1] + 1:
        warnings.warn(f"only {n_train} training rows for {X.shape[1]} features; fit is degenerate",
                      RuntimeWarning)
    mu_x, mu_y = X[tr].mean(axis=0), y[tr].mean()
    Xc = X[tr] - mu_x
    gram = Xc.T @ Xc
    damp = ridge * max(np.trace(gram) / max(X.shape[1], 1), np.finfo(float).tiny)
    coef = np.linalg.solve(gram + damp * np.eye(X.shape[1]), Xc.T @ (y[tr] - mu_y))
    pred = (X[te] - mu_x) @ coef + mu_y
    sst = np.sum((y[te] - y[te].mean()) ** 2)
    if sst == 0:
        warnings.warn("held-out target has zero variance; R^2 reported as 0", RuntimeWarning)
        return 0.0
    return float(np.clip(1.0 - np.sum((y[te] - pred) ** 2) / sst, -1.0, 1.0))


def embedding_grid_centers(rows, cols):
    """Normalized (lat, lon) cell centres of a rows x cols grid over [-1, 1]^2."""
    if rows < 1 or cols < 1:
        raise ParameterError(f"grid dims must be positive, got {rows}x{cols}")
    lat = -1.0 + (np.arange(rows) + 0.5) * 2.0 / rows
    lon = -1.0 + (np.arange(cols) + 0.5) * 2.0 / cols
    glat, glon = np.meshgrid(lat, lon, indexing="ij")
    return np.stack([glat.ravel(), glon.ravel()], axis=1)


def export_embedding_grid(model, dims, path):
    """Write embeddings at grid cell centres: JSON header line + rows*cols*F float32 LE values."""
    rows, cols = dims
    emb = model.embed_array(embedding_grid_centers(rows, cols)).astype("<f4")
    header = {"format": EMBEDDING_FORMAT, "version": 1, "rows": int(rows), "cols": int(cols),
              "features": int(emb.shape[1]), "dtype": "float32-le", "order": "row-major",
              "plan": model.plan.to_dict(), "config": getattr(model, "config", {}) or {}}
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(emb.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write embedding grid to {path}: {exc}") from exc
    return path


def read_embedding_grid(path):
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    header = json.loads(head.decode("utf-8"))
    arr = np.frombuffer(body, dtype="<f4").reshape(header["rows"] * header["cols"], header["features"])
    return header, arr


def benchmark_timing(configs, data, repetitions=2, eval_coords=None, max_batches=None,
                     reference_implicitness=1.0):
    """Per-epoch training time and inference time per config, over ``repetitions`` runs.

    Each config is trained for one epoch per repetition with seeds
    ``seed, seed+1, ...``. Rows carry mean and standard deviation plus the
    ratio to the config whose implicitness equals ``reference_implicitness``.
    """
    from .training import train_model

    if repetitions < 1:
        raise ParameterError(f"repetitions must be >= 1, got {repetitions}")
    if eval_coords is None:
        eval_coords = embedding_grid_centers(100, 100)
    rows = []
    for cfg in configs:
        train_t, infer_t = [], []
        for rep in range(repetitions):
            c = replace(cfg, epochs=1, seed=cfg.seed + rep)
            t0 = time.perf_counter()
            model, _ = train_model(c, data, max_batches=max_batches)
            train_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            model.predict(eval_coords)
            infer_t.append(time.perf_counter() - t0)
        rows.append({"implicitness": cfg.implicitness, "F": cfg.features,
                     "M": cfg.plan().M, "L": cfg.plan().L, "repetitions": repetitions,
                     "train_mean": float(np.mean(train_t)), "train_std": float(np.std(train_t)),
                     "infer_mean": float(np.mean(infer_t)), "infer_std": float(np.std(infer_t))})
    ref = [r for r in rows if r["implicitness"] == reference_implicitness]
    for r in rows:
        r["train_ratio"] = r["train_mean"] / ref[0]["train_mean"] if ref else float("nan")
        r["infer_ratio"] = r["infer_mean"] / ref[0]["infer_mean"] if ref else float("nan")
    return rows


TIMING_COLUMNS = ("implicitness", "F", "L", "M", "repetitions", "train_mean", "train_std",
                  "train_ratio", "infer_mean", "infer_std", "infer_ratio")


def write_timing(rows, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
