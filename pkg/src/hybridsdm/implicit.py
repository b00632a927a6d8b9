"""Implicit location encoder: wrap encoding followed by a residual MLP."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, ParameterError

N_BLOCKS = 4


def check_coords(coords):
    """Return ``coords`` as an N x 2 array, raising if any value leaves [-1, 1]."""
    arr = coords.values if isinstance(coords, T.Tensor) else np.asarray(coords, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DimensionError(f"coordinates must be N x 2, got shape {arr.shape}")
    bad = ~np.all(np.isfinite(arr) & (np.abs(arr) <= 1.0), axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"coordinate row {row} = {arr[row].tolist()} outside [-1, 1]"
            f" ({int(bad.sum())} bad rows)")
    return arr


def wrap_encode(coords):
    """Map normalized (lat, lon) rows to (sin pi lon, cos pi lon, sin pi lat, cos pi lat)."""
    arr = check_coords(coords)
    lat, lon = np.pi * arr[:, 0], np.pi * arr[:, 1]
    enc = np.stack([np.sin(lon), np.cos(lon), np.sin(lat), np.cos(lat)], axis=1)
    # sin(pi) evaluates to 1.2e-16, not 0; pin the seam so lon=-1 and lon=+1 agree exactly
    edge = np.abs(arr[:, 1]) == 1.0
    enc[edge, 0] = 0.0
    edge = np.abs(arr[:, 0]) == 1.0
    enc[edge, 2] = 0.0
    return T.Tensor(enc)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ImplicitEncoder:
    """FCNet-style encoder producing an N x width embedding.

    Layout: Linear(4 -> width) + ReLU, then four residual blocks computing
    ``y + relu(W2 @ dropout(relu(W1 @ y)))``.
    """

    def __init__(self, width, dropout_p=0.5, rng=None):
        if width < 1:
            raise ParameterError(f"implicit width must be >= 1, got {width}")
        if not 0.0 <= dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {dropout_p}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.width = int(width)
        self.dropout_p = float(dropout_p)
        self.input_weight = T.Tensor(_uniform(rng, 4, (4, width)), True, "implicit.input.weight")
        self.input_bias = T.Tensor(np.zeros((1, width)), True, "implicit.input.bias")
        self.blocks = []
        for b in range(N_BLOCKS):
            layer = {}
            for k in (1, 2):
                layer[f"w{k}"] = T.Tensor(_uniform(rng, width, (width, width)), True,
                                          f"implicit.block{b}.linear{k}.weight")
                layer[f"b{k}"] = T.Tensor(np.zeros((1, width)), True,
                                          f"implicit.block{b}.linear{k}.bias")
            self.blocks.append(layer)

    def parameters(self):
        params = [self.input_weight, self.input_bias]
        for layer in self.blocks:
            params.extend([layer["w1"], layer["b1"], layer["w2"], layer["b2"]])
        return params

    def num_parameters(self):
        return sum(p.values.size for p in self.parameters())

    @staticmethod
    def expected_parameter_count(width):
        return 4 * width + width + N_BLOCKS * 2 * (width * width + width)

    def forward(self, coords, training=False, rng=None):
        if training and self.dropout_p > 0 and rng is None:
            raise ParameterError("training-mode forward needs an rng for dropout")
        y = T.relu(T.linear(wrap_encode(coords), self.input_weight, self.input_bias))
        for layer in self.blocks:
            h = T.relu(T.linear(y, layer["w1"], layer["b1"]))
            h = T.dropout(h, self.dropout_p, training, rng)
            h = T.relu(T.linear(h, layer["w2"], layer["b2"]))
            y = T.add(y, h)
        return y

    __call__ = forward
