import math

import numpy as np
import pytest

from hybridsdm import tensor as T
from hybridsdm.model import GridConfig, HybridModel, plan_capacity


def finite_difference(f, param, entries, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. the listed flat entries of ``param``."""
    flat = param.values.reshape(-1)
    out = np.empty(len(entries))
    for k, e in enumerate(entries):
        orig = flat[e]
        flat[e] = orig + h
        up = f()
        flat[e] = orig - h
        down = f()
        flat[e] = orig
        out[k] = (up - down) / (2 * h)
    return out


def rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_entries(param, rng, n_random=24):
    """Every entry with a nonzero gradient (capped) plus a random sample of the rest."""
    size = param.values.size
    nonzero = np.flatnonzero(param.grad.reshape(-1)) if param.grad is not None else np.array([], int)
    if len(nonzero) > 64:
        nonzero = rng.choice(nonzero, 64, replace=False)
    sample = rng.choice(size, min(size, n_random), replace=False)
    return np.unique(np.concatenate([nonzero, sample]))


def naive_an_full_loss(p, species, q, lam):
    """Double loop over observations and species, term by term."""
    n, s = p.shape
    total = 0.0
    for i in range(n):
        for j in range(s):
            if j == species[i]:
                total += lam * math.log(p[i, j])
            else:
                total += math.log(1.0 - p[i, j])
            total += math.log(1.0 - q[i, j])
    return -total / (n * s)


def brute_force_ap(scores, labels):
    """O(n^2) AP: for each positive, count items ranked at or above it under a stable sort."""
    n = len(scores)
    precisions = []
    for i in range(n):
        if not labels[i]:
            continue
        # items strictly better, or tied and earlier in the input, rank above i
        above = [k for k in range(n) if scores[k] > scores[i] or (scores[k] == scores[i] and k < i)]
        rank = len(above) + 1
        hits = sum(1 for k in above if labels[k]) + 1
        precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def py_vertex_index(i, j, cells, table_size):
    """Plain-integer reimplementation of the lattice addressing rule."""
    i, j, side = int(i), int(j), cells + 1
    if side * side <= table_size:
        return i * side + j
    return ((i * 1) ^ ((j * 2654435761) % 2 ** 64)) % table_size


def scalar_encode(enc, lat, lon):
    """Per-point, per-level bilinear interpolation written with Python scalars."""
    out = []
    for level, table in zip(enc.levels, enc.tables):
        n = level.cells
        u, v = (lat + 1) / 2 * n, (lon + 1) / 2 * n
        i, j = min(int(math.floor(u)), n - 1), min(int(math.floor(v)), n - 1)
        fu, fv = u - i, v - j
        feats = [0.0] * enc.n_features
        for di, dj, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                          (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
            row = py_vertex_index(i + di, j + dj, n, enc.base_table_size)
            for m in range(enc.n_features):
                feats[m] += w * table.values[row, m]
        out.extend(feats)
    return out


def randomize_model(model, rng, scale=0.5):
    """Give every parameter non-trivial values so no gradient path is dead."""
    for p in model.parameters():
        p.values = rng.uniform(-scale, scale, size=p.values.shape)
    return model


def oracle_model(rasters, vocab=None, sharpness=20.0):
    """Model whose predictions reproduce 100x100 raster labels at the cell centres.

    A single dense level with 200 cells puts a lattice vertex on every centre
    of a 100 x 100 grid; the vertex feature is the species indicator.
    """
    S = len(rasters)
    M = 1 << max(0, math.ceil(math.log2(S)))
    plan = plan_capacity(0.0, M, M)
    model = HybridModel(plan, S, GridConfig(200.0, 200.0, 2 ** 16), dropout_p=0.0)
    table = model.explicit.tables[0]
    table.values[:] = 0.0
    level = model.explicit.levels[0]
    for s, r in enumerate(rasters):
        assert r.shape == (100, 100)
        rows, cols = np.meshgrid(np.arange(100), np.arange(100), indexing="ij")
        idx = (2 * rows + 1) * level.side + (2 * cols + 1)
        table.values[idx.ravel()[r.mask.ravel()], s] = r.labels
    model.weight.values[:] = 0.0
    model.weight.values[np.arange(S), np.arange(S)] = sharpness
    model.bias.values[:] = -sharpness / 2
    model.vocab = vocab if vocab is not None else [r.species_id for r in rasters]
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    """Print a one-line verdict now and again in the terminal summary."""
    line = f"[acceptance {number!s:>3}] {'PASS' if passed else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
