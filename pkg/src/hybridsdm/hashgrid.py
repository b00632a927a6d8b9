"""Explicit location encoder: a 2D multiresolution hash grid.

Each level lays a regular lattice of ``cells x cells`` over [-1, 1]^2 and
stores an M-dimensional trainable feature vector per lattice vertex. Small
lattices are stored densely; larger ones share a fixed-size table addressed
through a spatial hash. A point's level feature is the bilinear blend of its
cell's four corner vectors, and the levels are concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, ParameterError
from .implicit import check_coords

HASH_PRIMES = (1, 2654435761)
DEFAULT_TABLE_SIZE = 2 ** 14
INIT_SCALE = 1e-4


def resolution_schedule(r_min, r_max, n_levels):
    """Geometric sequence of per-level resolutions from ``r_min`` to ``r_max``."""
    if n_levels < 1:
        raise ParameterError(f"need at least one level, got {n_levels}")
    if r_min < 1 or r_max < r_min:
        raise ParameterError(f"require r_max >= r_min >= 1, got r_min={r_min}, r_max={r_max}")
    if n_levels == 1:
        return [float(r_min)]
    log_span = math.log(r_max) - math.log(r_min)
    out = [r_min * math.exp(l / (n_levels - 1) * log_span) for l in range(n_levels)]
    # the formula reproduces the endpoints only up to rounding
    out[0], out[-1] = float(r_min), float(r_max)
    return out


@dataclass(frozen=True)
class GridLevelSpec:
    level: int
    resolution: float
    cells: int
    table_size: int
    dense: bool

    @property
    def side(self):
        """Number of lattice vertices along one axis."""
        return self.cells + 1


def make_levels(r_min, r_max, n_levels, table_size=DEFAULT_TABLE_SIZE):
    levels = []
    for l, res in enumerate(resolution_schedule(r_min, r_max, n_levels)):
        cells = max(1, int(math.floor(res)))
        dense = (cells + 1) ** 2 <= table_size
        levels.append(GridLevelSpec(l, res, cells, (cells + 1) ** 2 if dense else table_size, dense))
    return levels


def _hash(i, j, table_size):
    i = np.asarray(i).astype(np.uint64)
    j = np.asarray(j).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = (i * np.uint64(HASH_PRIMES[0])) ^ (j * np.uint64(HASH_PRIMES[1]))
    return (h % np.uint64(table_size)).astype(np.int64)


def vertex_index(i, j, level):
    """Table row holding the features of lattice vertex (i, j) on ``level``.

    Accepts scalars or integer arrays of equal shape.
    """
    i_arr, j_arr = np.asarray(i), np.asarray(j)
    if np.any((i_arr < 0) | (i_arr > level.cells) | (j_arr < 0) | (j_arr > level.cells)):
        raise DomainError(f"vertex ({i}, {j}) outside the {level.side}x{level.side} lattice "
                          f"of level {level.level}")
    if level.dense:
        idx = i_arr.astype(np.int64) * level.side + j_arr.astype(np.int64)
    else:
        idx = _hash(i_arr, j_arr, level.table_size)
    return int(idx) if np.ndim(idx) == 0 else idx


class HashGridEncoder:
    """Multiresolution grid with ``n_levels`` levels of ``n_features`` features each.

    ``wrap_lon`` identifies the lon = -1 and lon = +1 lattice columns so the
    grid becomes a cylinder; it is off by default.
    """

    def __init__(self, n_levels, n_features, r_min=16, r_max=512,
                 table_size=DEFAULT_TABLE_SIZE, wrap_lon=False, rng=None):
        if n_levels < 1 or n_features < 1:
            raise ParameterError(f"need n_levels >= 1 and n_features >= 1, got {n_levels}, {n_features}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_features = int(n_features)
        self.r_min, self.r_max = float(r_min), float(r_max)
        self.wrap_lon = bool(wrap_lon)
        self.base_table_size = int(table_size)
        self.levels = make_levels(r_min, r_max, n_levels, table_size)
        self.tables = [
            T.Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(lv.table_size, n_features)),
                     True, f"hashgrid.level{lv.level}")
            for lv in self.levels
        ]

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def output_dim(self):
        return self.n_levels * self.n_features

    def parameters(self):
        return list(self.tables)

    def num_parameters(self):
        return sum(lv.table_size for lv in self.levels) * self.n_features

    def _corners(self, coords, level):
        """Table rows (4 x N) and bilinear weights (4 x N) for every point."""
        n = level.cells
        u = (coords + 1.0) * (0.5 * n)
        cell = np.clip(np.floor(u), 0, n - 1).astype(np.int64)
        frac = u - cell
        i0, j0 = cell[:, 0], cell[:, 1]
        fi, fj = frac[:, 0], frac[:, 1]
        i1, j1 = i0 + 1, j0 + 1
        if self.wrap_lon:
            j1 = np.where(j1 == n, 0, j1)
        idx = np.stack([vertex_index(i0, j0, level), vertex_index(i1, j0, level),
                        vertex_index(i0, j1, level), vertex_index(i1, j1, level)])
        w = np.stack([(1 - fi) * (1 - fj), fi * (1 - fj), (1 - fi) * fj, fi * fj])
        return idx, w

    def _forward_values(self, arr):
        out = np.empty((arr.shape[0], self.output_dim))
        M = self.n_features
        corners = []
        for level, table in zip(self.levels, self.tables):
            idx, w = self._corners(arr, level)
            tv = table.values
            out[:, level.level * M:(level.level + 1) * M] = (
                w[0, :, None] * tv[idx[0]] + w[1, :, None] * tv[idx[1]]
                + w[2, :, None] * tv[idx[2]] + w[3, :, None] * tv[idx[3]])
            corners.append((idx, w))
        return out, corners

    def _scatter(self, corners, upstream):
        M = self.n_features
        grads = []
        for level, (idx, w) in zip(self.levels, corners):
            g = upstream[:, level.level * M:(level.level + 1) * M]
            flat = (idx[:, :, None] * M + np.arange(M)).ravel()
            vals = (w[:, :, None] * g[None, :, :]).ravel()
            grads.append(np.bincount(flat, weights=vals, minlength=level.table_size * M)
                         .reshape(level.table_size, M))
        return grads

    def encode(self, coords):
        """N x (L*M) embedding; differentiable with respect to the feature tables."""
        arr = check_coords(coords)
        out, corners = self._forward_values(arr)
        return T.from_op(out, self.tables, lambda g: self._scatter(corners, g))

    __call__ = encode

    def encode_backward(self, coords, upstream):
        """Accumulate the adjoint of :meth:`encode` into the tables' ``.grad``."""
        arr = check_coords(coords)
        up = upstream.values if isinstance(upstream, T.Tensor) else np.asarray(upstream, float)
        if up.shape != (arr.shape[0], self.output_dim):
            raise DimensionError(f"upstream shape {up.shape} does not match "
                                 f"({arr.shape[0]}, {self.output_dim})")
        corners = [self._corners(arr, level) for level in self.levels]
        for table, g in zip(self.tables, self._scatter(corners, up)):
            if table.grad is None:
                table.zero_grad()
            table.grad += g
