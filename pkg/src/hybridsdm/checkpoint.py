"""Versioned, digest-protected model checkpoints.

File layout (all integers little-endian)::

    8 bytes   magic b"HSDMCKPT"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: format_version, plan, grid, hash constants,
              species vocabulary, config echo, seed, history and a block
              manifest [{name, shape, offset, nbytes}, ...]
    ...       parameter blocks, float32 little-endian, row-major, in manifest order
    32 bytes  SHA-256 of every preceding byte

Parameters are always stored as float32, so a model trained in float64 is
rounded once when its checkpoint is made. Reloading a checkpoint reproduces
those float32 values exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .hashgrid import HASH_PRIMES, make_levels
from .model import CapacityPlan, GridConfig, HybridModel

MAGIC = b"HSDMCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    plan: CapacityPlan
    grid: GridConfig
    n_species: int
    params: dict
    dropout_p: float = 0.5
    vocab: list = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model, config=None, seed=0, vocab=None, history=None):
        params = {name: np.asarray(p.values, dtype="<f4").copy()
                  for name, p in model.named_parameters().items()}
        vocab = vocab if vocab is not None else getattr(model, "vocab", None)
        config = config if config is not None else getattr(model, "config", None)
        return cls(model.plan, model.grid, model.n_species, params, model.dropout_p,
                   list(vocab) if vocab is not None else None, dict(config or {}), int(seed),
                   list(history or []))

    def to_model(self):
        model = HybridModel(self.plan, self.n_species, self.grid, self.dropout_p)
        named = model.named_parameters()
        if set(named) != set(self.params):
            missing = sorted(set(named) - set(self.params))
            extra = sorted(set(self.params) - set(named))
            raise CheckpointError(f"parameter blocks do not match the plan: missing {missing}, "
                                  f"unexpected {extra}")
        for name, p in named.items():
            arr = self.params[name]
            if arr.shape != p.values.shape:
                raise CheckpointError(f"block {name!r}: shape {arr.shape} does not match "
                                      f"expected {p.values.shape}")
            p.values = arr.astype(np.float64)
        model.vocab = self.vocab
        model.config = dict(self.config)
        return model

    def header(self):
        table_sizes = []
        if self.plan.L > 0:
            table_sizes = [lv.table_size for lv in
                           make_levels(self.grid.r_min, self.grid.r_max, self.plan.L, self.grid.table_size)]
        return {
            "format_version": FORMAT_VERSION,
            "plan": self.plan.to_dict(),
            "grid": {"r_min": self.grid.r_min, "r_max": self.grid.r_max,
                     "table_size": self.grid.table_size, "wrap_lon": self.grid.wrap_lon},
            "hash": {"primes": list(HASH_PRIMES), "table_sizes": table_sizes},
            "n_species": self.n_species,
            "dropout_p": self.dropout_p,
            "vocab": self.vocab,
            "config": self.config,
            "seed": self.seed,
            "history": self.history,
        }


def save_checkpoint(model, path, config=None, seed=None, vocab=None, history=None):
    """Write ``model`` (a HybridModel or Checkpoint) to ``path``; returns the path."""
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.from_model(
        model, config, seed or 0, vocab, history)
    if config is not None and isinstance(model, Checkpoint):
        ckpt.config = dict(config)
    header = ckpt.header()
    blocks, offset = [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header["blocks"] = blocks
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray(MAGIC)
    payload += struct.pack("<I", len(head))
    payload += head
    for b in blocks:
        payload += np.ascontiguousarray(ckpt.params[b["name"]], dtype="<f4").tobytes()
    payload += hashlib.sha256(payload).digest()
    path = Path(path)
    path.write_bytes(bytes(payload))
    return path


def read_checkpoint(path):
    """Parse and verify a checkpoint file into a :class:`Checkpoint`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(raw) < len(MAGIC) + 4 + _DIGEST or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: integrity digest mismatch (file truncated or corrupted)")
    (hlen,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')} "
                              f"(expected {FORMAT_VERSION})")
    if header["hash"]["primes"] != list(HASH_PRIMES):
        raise CheckpointError(f"{path}: hash constants {header['hash']['primes']} differ from "
                              f"{list(HASH_PRIMES)}")
    data = body[12 + hlen:]
    params = {}
    for b in header["blocks"]:
        shape = tuple(b["shape"])
        nbytes = int(np.prod(shape)) * 4
        if nbytes != b["nbytes"] or b["offset"] + nbytes > len(data):
            raise CheckpointError(f"{path}: block {b['name']!r} shape {shape} inconsistent with its "
                                  f"byte range")
        params[b["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4,
                                          offset=b["offset"]).reshape(shape).copy()
    g = header["grid"]
    ckpt = Checkpoint(CapacityPlan(**header["plan"]),
                      GridConfig(g["r_min"], g["r_max"], g["table_size"], g["wrap_lon"]),
                      header["n_species"], params, header["dropout_p"], header["vocab"],
                      header["config"], header["seed"], header["history"])
    if header["hash"]["table_sizes"] != ckpt.header()["hash"]["table_sizes"]:
        raise CheckpointError(f"{path}: hash table sizes {header['hash']['table_sizes']} do not "
                              "match the stored plan")
    return ckpt


def load_checkpoint(path):
    """Load a checkpoint file straight into a :class:`HybridModel`."""
    return read_checkpoint(path).to_model()
