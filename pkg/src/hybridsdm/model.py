"""Hybrid location model: implicit and explicit embeddings feeding a linear-sigmoid head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .hashgrid import DEFAULT_TABLE_SIZE, HashGridEncoder
from .implicit import ImplicitEncoder, check_coords

DEFAULT_FEATURES = 256


def default_features_per_level(implicitness):
    """16 features per level for explicit-leaning plans, 8 otherwise."""
    return 16 if implicitness < 0.5 else 8


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class CapacityPlan:
    F: int
    implicitness: float
    F_i: int
    L: int
    M: int

    @property
    def F_e(self):
        return self.L * self.M

    def to_dict(self):
        return asdict(self)


def plan_capacity(implicitness, F=DEFAULT_FEATURES, M=None):
    """Split an F-dimensional embedding into implicit width and hash-grid levels.

    Returns a plan with ``F_i = round(implicitness * F)`` and ``L * M = F - F_i``.

    >>> plan_capacity(0.25, 256, 16)
    CapacityPlan(F=256, implicitness=0.25, F_i=64, L=12, M=16)
    """
    if not 0.0 <= implicitness <= 1.0:
        raise ParameterError(f"implicitness must lie in [0, 1], got {implicitness}")
    if F < 1:
        raise ParameterError(f"embedding dimension F must be positive, got {F}")
    M = default_features_per_level(implicitness) if M is None else int(M)
    if not _is_power_of_two(M):
        raise ParameterError(f"features per level M must be a power of two, got {M}")
    F_i = int(math.floor(implicitness * F + 0.5))
    rest = F - F_i
    if rest % M:
        valid = [(F - k * M) / F for k in range(F // M + 1)]
        nearest = min(valid, key=lambda v: abs(v - implicitness))
        raise ParameterError(
            f"F - F_i = {rest} is not divisible by M = {M} "
            f"(implicitness={implicitness}, F={F}); nearest valid implicitness is {nearest:g}")
    return CapacityPlan(F=int(F), implicitness=float(implicitness), F_i=F_i, L=rest // M, M=M)


@dataclass(frozen=True)
class GridConfig:
    r_min: float = 16.0
    r_max: float = 512.0
    table_size: int = DEFAULT_TABLE_SIZE
    wrap_lon: bool = False


class HybridModel:
    """Occupancy model ``sigmoid((g_i(x) ++ g_e(x)) W + b)`` over S species.

    The implicit branch is absent when ``plan.F_i == 0``; the explicit branch is
    absent when ``plan.L == 0``. The predictor starts at zero so every initial
    probability is 0.5.
    """

    def __init__(self, plan, n_species, grid=GridConfig(), dropout_p=0.5, rng=None):
        if n_species < 1:
            raise ParameterError(f"need at least one species, got {n_species}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.plan = plan
        self.n_species = int(n_species)
        self.grid = grid
        self.dropout_p = float(dropout_p)
        self.implicit = ImplicitEncoder(plan.F_i, dropout_p, rng) if plan.F_i > 0 else None
        self.explicit = (HashGridEncoder(plan.L, plan.M, grid.r_min, grid.r_max,
                                         grid.table_size, grid.wrap_lon, rng)
                         if plan.L > 0 else None)
        self.weight = T.Tensor(np.zeros((plan.F, n_species)), True, "predictor.weight")
        self.bias = T.Tensor(np.zeros((1, n_species)), True, "predictor.bias")
        self.vocab = None
        self.config = {}

    def named_parameters(self):
        params = {}
        if self.implicit is not None:
            params.update((p.name, p) for p in self.implicit.parameters())
        if self.explicit is not None:
            params.update((p.name, p) for p in self.explicit.parameters())
        params[self.weight.name] = self.weight
        params[self.bias.name] = self.bias
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def parameter_groups(self):
        """Parameters split into 'predictor', 'implicit' and 'explicit' groups."""
        groups = {"predictor": [self.weight, self.bias]}
        if self.implicit is not None:
            groups["implicit"] = self.implicit.parameters()
        if self.explicit is not None:
            groups["explicit"] = self.explicit.parameters()
        return groups

    def num_parameters(self):
        return sum(p.values.size for p in self.parameters())

    def expected_parameter_count(self):
        total = self.plan.F * self.n_species + self.n_species
        if self.implicit is not None:
            total += ImplicitEncoder.expected_parameter_count(self.plan.F_i)
        if self.explicit is not None:
            total += sum(lv.table_size for lv in self.explicit.levels) * self.plan.M
        return total

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def embed(self, coords, training=False, rng=None):
        coords = T.as_tensor(check_coords(coords))
        parts = []
        if self.implicit is not None:
            parts.append(self.implicit.forward(coords, training, rng))
        if self.explicit is not None:
            parts.append(self.explicit.encode(coords))
        return parts[0] if len(parts) == 1 else T.concat_cols(parts[0], parts[1])

    def logits(self, coords, training=False, rng=None):
        return T.linear(self.embed(coords, training, rng), self.weight, self.bias)

    def forward(self, coords, training=False, rng=None):
        """Probabilities as a Tensor attached to the autodiff graph."""
        return T.sigmoid(self.logits(coords, training, rng))

    def predict(self, coords, batch_size=65536):
        """Inference-mode N x S probabilities as a plain array."""
        arr = check_coords(coords)
        with T.no_grad():
            out = [self.forward(arr[i:i + batch_size]).values
                   for i in range(0, max(len(arr), 1), batch_size)]
        return np.concatenate(out, axis=0)

    def embed_array(self, coords, batch_size=65536):
        arr = check_coords(coords)
        with T.no_grad():
            out = [self.embed(arr[i:i + batch_size]).values
                   for i in range(0, max(len(arr), 1), batch_size)]
        return np.concatenate(out, axis=0)
