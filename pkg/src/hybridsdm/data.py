"""Presence-only observations, synthetic ground truth and evaluation rasters.

Coordinates are always stored normalized: ``lat / 90`` and ``lon / 180``, so
the domain is [-1, 1]^2 with column 0 = latitude and column 1 = longitude.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, IngestionError

RASTER_FORMAT = "hybridsdm-raster"
RASTER_VERSION = 1
INVALID_CELL = 255


@dataclass
class ObservationSet:
    coords: np.ndarray
    species: np.ndarray
    vocab: dict = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        if len(self.coords) != len(self.species):
            raise ValueError(f"{len(self.coords)} coordinates but {len(self.species)} species labels")
        if not self.vocab:
            n = int(self.species.max()) + 1 if len(self.species) else 0
            self.vocab = {str(k): k for k in range(n)}

    def __len__(self):
        return len(self.species)

    @property
    def n_species(self):
        return len(self.vocab)

    @property
    def species_ids(self):
        """Species ids ordered by their index."""
        return [sid for sid, _ in sorted(self.vocab.items(), key=lambda kv: kv[1])]

    def counts(self):
        return np.bincount(self.species, minlength=self.n_species)

    def take(self, rows, provenance=None):
        rows = np.asarray(rows, dtype=np.int64)
        return ObservationSet(self.coords[rows], self.species[rows], dict(self.vocab),
                              self.provenance if provenance is None else provenance)

    def restrict_species(self, keep):
        """Keep only the listed species indices and re-index them contiguously."""
        keep = [int(k) for k in keep]
        remap = np.full(self.n_species, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        rows = np.flatnonzero(remap[self.species] >= 0)
        ids = self.species_ids
        return ObservationSet(self.coords[rows], remap[self.species[rows]],
                              {ids[k]: i for i, k in enumerate(keep)},
                              f"{self.provenance}|species[{len(keep)}]")

    def validate(self):
        if len(self.coords) and np.abs(self.coords).max() > 1.0:
            raise ValueError("observation coordinates outside [-1, 1]")
        if len(self.species) and (self.species.min() < 0 or self.species.max() >= self.n_species):
            raise ValueError("species index outside the vocabulary")
        if sorted(self.vocab.values()) != list(range(self.n_species)):
            raise ValueError("vocabulary indices are not contiguous from 0")

    def __eq__(self, other):
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return (np.array_equal(self.coords, other.coords)
                and np.array_equal(self.species, other.species)
                and self.vocab == other.vocab)


def load_observations(path, lat_col="lat", lon_col="lon", species_col="taxon_id"):
    """Read a UTF-8 CSV of presence records given in degrees.

    The species vocabulary is built in order of first appearance. Every bad
    row is collected and reported together in an :class:`IngestionError`.
    """
    path = Path(path)
    coords, species, vocab, problems = [], [], {}, []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in (lat_col, lon_col, species_col) if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {missing}; header is {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                lat = float(row[lat_col])
                lon = float(row[lon_col])
            except (TypeError, ValueError):
                problems.append(f"line {lineno}: unparseable coordinates "
                                f"({row.get(lat_col)!r}, {row.get(lon_col)!r})")
                continue
            sid = (row.get(species_col) or "").strip()
            if not sid:
                problems.append(f"line {lineno}: empty species id")
                continue
            if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
                problems.append(f"line {lineno}: latitude {lat} outside [-90, 90]")
                continue
            if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
                problems.append(f"line {lineno}: longitude {lon} outside [-180, 180]")
                continue
            coords.append((lat / 90.0, lon / 180.0))
            species.append(vocab.setdefault(sid, len(vocab)))
    if problems:
        raise IngestionError(f"{path}: {len(problems)} malformed row(s)", problems)
    return ObservationSet(np.array(coords, dtype=np.float64).reshape(-1, 2),
                          np.array(species, dtype=np.int64), vocab, f"csv:{path}")


def write_observations(obs, path, lat_col="lat", lon_col="lon", species_col="taxon_id"):
    ids = obs.species_ids
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([lat_col, lon_col, species_col])
        for (lat, lon), s in zip(obs.coords, obs.species):
            w.writerow([repr(float(lat) * 90.0), repr(float(lon) * 180.0), ids[s]])


# ---------------------------------------------------------------------------
# Ground-truth regions

class Region:
    """A subset of [-1, 1]^2 given by a vectorized membership predicate."""

    kind = "region"

    def contains(self, coords):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


@dataclass
class Full(Region):
    kind = "full"

    def contains(self, coords):
        return np.ones(len(coords), dtype=bool)

    def to_dict(self):
        return {"type": self.kind}


@dataclass
class Blob(Region):
    """Superlevel set ``exp(-|x - c|^2 / 2 sigma^2) >= level`` of a Gaussian bump."""

    center: tuple
    sigma: float
    level: float = 0.5
    kind = "blob"

    def contains(self, coords):
        d2 = ((np.asarray(coords) - np.asarray(self.center)) ** 2).sum(axis=1)
        return np.exp(-d2 / (2.0 * self.sigma ** 2)) >= self.level

    def to_dict(self):
        return {"type": self.kind, "center": list(self.center), "sigma": self.sigma,
                "level": self.level}


@dataclass
class HalfPlane(Region):
    """Points with ``normal . x > offset``."""

    normal: tuple
    offset: float = 0.0
    kind = "halfplane"

    def contains(self, coords):
        return np.asarray(coords) @ np.asarray(self.normal, dtype=float) > self.offset

    def to_dict(self):
        return {"type": self.kind, "normal": list(self.normal), "offset": self.offset}


@dataclass
class Stripe(Region):
    """Band of the given ``width`` centred on the line ``normal . x = center``."""

    normal: tuple
    center: float
    width: float
    kind = "stripe"

    def contains(self, coords):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        return np.abs(np.asarray(coords) @ n - self.center) < 0.5 * self.width

    def to_dict(self):
        return {"type": self.kind, "normal": list(self.normal), "center": self.center,
                "width": self.width}


@dataclass
class Checker(Region):
    """Squares of one colour in a ``squares x squares`` checkerboard."""

    squares: int = 32
    parity: int = 0
    kind = "checker"

    def contains(self, coords):
        return checkerboard_field(coords, self.squares) == (1.0 if self.parity == 0 else -1.0)

    def to_dict(self):
        return {"type": self.kind, "squares": self.squares, "parity": self.parity}


@dataclass
class Union(Region):
    parts: list
    kind = "union"

    def contains(self, coords):
        out = np.zeros(len(coords), dtype=bool)
        for p in self.parts:
            out |= p.contains(coords)
        return out

    def to_dict(self):
        return {"type": self.kind, "parts": [p.to_dict() for p in self.parts]}


@dataclass
class Intersect(Region):
    parts: list
    kind = "intersect"

    def contains(self, coords):
        out = np.ones(len(coords), dtype=bool)
        for p in self.parts:
            out &= p.contains(coords)
        return out

    def to_dict(self):
        return {"type": self.kind, "parts": [p.to_dict() for p in self.parts]}


_REGION_TYPES = {cls.kind: cls for cls in (Full, Blob, HalfPlane, Stripe, Checker, Union, Intersect)}


def region_from_dict(d):
    d = dict(d)
    cls = _REGION_TYPES[d.pop("type")]
    if cls in (Union, Intersect):
        return cls([region_from_dict(p) for p in d["parts"]])
    for key in ("center", "normal"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return cls(**d)


def checkerboard_field(coords, squares=32):
    """+1 / -1 checkerboard with ``squares`` squares per axis over [-1, 1]^2."""
    c = np.asarray(coords, dtype=float)
    k = np.clip(np.floor((c + 1.0) * 0.5 * squares), 0, squares - 1).astype(np.int64)
    return np.where((k[:, 0] + k[:, 1]) % 2 == 0, 1.0, -1.0)


@dataclass
class SpeciesSpec:
    name: str
    region: Region
    family: str = "blob"


@dataclass
class SyntheticSpec:
    species: list
    obs_per_species: int = 500
    raster_shape: tuple = (100, 100)
    max_draws_per_point: int = 2000

    def to_dict(self):
        return {"obs_per_species": self.obs_per_species,
                "raster_shape": list(self.raster_shape),
                "max_draws_per_point": self.max_draws_per_point,
                "species": [{"name": s.name, "family": s.family, "region": s.region.to_dict()}
                            for s in self.species]}

    @classmethod
    def from_dict(cls, d):
        return cls([SpeciesSpec(s["name"], region_from_dict(s["region"]), s.get("family", "blob"))
                    for s in d["species"]],
                   int(d.get("obs_per_species", 500)),
                   tuple(d.get("raster_shape", (100, 100))),
                   int(d.get("max_draws_per_point", 2000)))

    def family_indices(self, family):
        return [i for i, s in enumerate(self.species) if s.family == family]


def default_synthetic_spec(n_blob=10, n_sharp=10, obs_per_species=500, seed=0,
                           raster_shape=(100, 100)):
    """Desk-scale benchmark mixing smooth blob ranges with sharp-edged ones.

    Blob species are unions of one to three Gaussian superlevel disks. Sharp
    species cycle through four shapes: a wedge (two half-planes meeting at an
    apex), a narrow stripe, a disk cut in half by a straight edge, and a disk
    restricted to one colour of the 32 x 32 checkerboard.
    """
    rng = np.random.default_rng(seed)
    species = []
    for k in range(n_blob):
        parts = [Blob(tuple(rng.uniform(-0.7, 0.7, 2).round(4).tolist()), round(float(rng.uniform(0.12, 0.3)), 4),
                      0.5) for _ in range(int(rng.integers(1, 4)))]
        species.append(SpeciesSpec(f"blob_{k:02d}", parts[0] if len(parts) == 1 else Union(parts), "blob"))
    for k in range(n_sharp):
        shape = k % 4
        apex = rng.uniform(-0.4, 0.4, 2)
        theta = rng.uniform(0, 2 * np.pi)
        spread = rng.uniform(np.pi / 4, 3 * np.pi / 4)
        n1 = _unit(theta)
        n2 = _unit(theta + spread)
        if shape == 0:
            region = Intersect([HalfPlane(n1, _dot(n1, apex)), HalfPlane(n2, _dot(n2, apex))])
        elif shape == 1:
            region = Stripe(n1, _dot(n1, apex), round(float(rng.uniform(0.1, 0.25)), 4))
        elif shape == 2:
            region = Intersect([Blob(tuple(apex.round(4).tolist()), 0.4, 0.5), HalfPlane(n1, _dot(n1, apex))])
        else:
            region = Intersect([Blob(tuple(apex.round(4).tolist()), 0.45, 0.5),
                                Checker(32, int(k // 4) % 2)])
        species.append(SpeciesSpec(f"sharp_{k:02d}", region, "sharp"))
    return SyntheticSpec(species, obs_per_species, tuple(raster_shape))


def _unit(theta):
    return (round(float(np.cos(theta)), 4), round(float(np.sin(theta)), 4))


def _dot(normal, point):
    return round(float(np.dot(normal, point)), 4)


@dataclass
class RangeRaster:
    """Expert-style range labels for one species at a set of evaluation cells.

    ``centers`` holds the normalized (lat, lon) of every valid cell and
    ``labels`` the matching 0/1 presence. Grid rasters also keep their
    ``shape`` and validity ``mask`` (row 0 is the southernmost row).
    """

    species_id: str
    centers: np.ndarray
    labels: np.ndarray
    shape: tuple = None
    mask: np.ndarray = None
    bounds: tuple = (-90.0, 90.0, -180.0, 180.0)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.centers) != len(self.labels):
            raise ValueError("centers and labels differ in length")

    @property
    def n_positive(self):
        return int(self.labels.sum())


def grid_centers(shape, bounds=(-90.0, 90.0, -180.0, 180.0)):
    """Normalized (lat, lon) cell centres of a row-major grid, row 0 southernmost."""
    rows, cols = shape
    lat0, lat1, lon0, lon1 = bounds
    lat = lat0 + (np.arange(rows) + 0.5) * (lat1 - lat0) / rows
    lon = lon0 + (np.arange(cols) + 0.5) * (lon1 - lon0) / cols
    glat, glon = np.meshgrid(lat / 90.0, lon / 180.0, indexing="ij")
    return np.stack([glat.ravel(), glon.ravel()], axis=1)


def raster_from_region(species_id, region, shape=(100, 100), bounds=(-90.0, 90.0, -180.0, 180.0)):
    centers = grid_centers(shape, bounds)
    labels = region.contains(centers).astype(np.uint8)
    return RangeRaster(species_id, centers, labels, tuple(shape),
                       np.ones(shape, dtype=bool), tuple(bounds))


def sample_region(region, n, rng, max_draws_per_point=2000, name="region"):
    """Rejection-sample ``n`` uniform points from ``region``."""
    out, drawn = [], 0
    budget = max_draws_per_point * n
    have = 0
    while have < n:
        if drawn >= budget:
            raise GenerationError(f"{name}: only {have} of {n} points accepted after {drawn} draws; "
                                  "region area is too small")
        batch = min(max(4 * (n - have), 1024), budget - drawn)
        pts = rng.uniform(-1.0, 1.0, size=(batch, 2))
        drawn += batch
        pts = pts[region.contains(pts)]
        out.append(pts)
        have += len(pts)
    return np.concatenate(out)[:n]


def generate_synthetic(spec, rng):
    """Sample presence points and exact range rasters for every species in ``spec``."""
    coords, species, rasters = [], [], []
    for k, sp in enumerate(spec.species):
        pts = sample_region(sp.region, spec.obs_per_species, rng, spec.max_draws_per_point, sp.name)
        coords.append(pts)
        species.append(np.full(len(pts), k, dtype=np.int64))
        rasters.append(raster_from_region(sp.name, sp.region, spec.raster_shape))
    obs = ObservationSet(np.concatenate(coords), np.concatenate(species),
                         {sp.name: k for k, sp in enumerate(spec.species)}, "synthetic")
    return obs, rasters


# ---------------------------------------------------------------------------
# Raster files

def write_raster(raster, path):
    """Write a grid raster: one JSON header line, then rows*cols label bytes.

    Byte values are 0 (absent), 1 (present) or 255 (invalid cell).
    """
    if raster.shape is None:
        raise ValueError("only grid rasters can be written in the raster file format")
    mask = np.ones(raster.shape, dtype=bool) if raster.mask is None else raster.mask
    grid = np.full(raster.shape, INVALID_CELL, dtype=np.uint8)
    grid[mask] = raster.labels
    header = {"format": RASTER_FORMAT, "version": RASTER_VERSION, "species_id": raster.species_id,
              "rows": int(raster.shape[0]), "cols": int(raster.shape[1]),
              "bounds": [float(b) for b in raster.bounds]}
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(grid.tobytes(order="C"))


def read_raster(path):
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing raster header line")
    header = json.loads(head.decode("utf-8"))
    if header.get("format") != RASTER_FORMAT:
        raise ValueError(f"{path}: not a {RASTER_FORMAT} file")
    if header.get("version") != RASTER_VERSION:
        raise ValueError(f"{path}: unsupported raster version {header.get('version')}")
    shape = (int(header["rows"]), int(header["cols"]))
    if len(body) != shape[0] * shape[1]:
        raise ValueError(f"{path}: expected {shape[0] * shape[1]} label bytes, found {len(body)}")
    grid = np.frombuffer(body, dtype=np.uint8).reshape(shape)
    if np.any((grid > 1) & (grid != INVALID_CELL)):
        raise ValueError(f"{path}: label bytes must be 0, 1 or {INVALID_CELL}")
    mask = grid != INVALID_CELL
    bounds = tuple(header["bounds"])
    centers = grid_centers(shape, bounds)[mask.ravel()]
    return RangeRaster(str(header["species_id"]), centers, grid[mask], shape, mask, bounds)


def write_rasters(rasters, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, r in enumerate(rasters):
        p = directory / f"{i:05d}.raster"
        write_raster(r, p)
        paths.append(p)
    return paths


def read_rasters(path):
    """Load one raster file, a directory of ``*.raster`` files, or a reference ``.npy`` bundle."""
    path = Path(path)
    if path.is_dir():
        return [read_raster(p) for p in sorted(path.glob("*.raster"))]
    if path.suffix == ".npy":
        return load_reference_rasters(path)
    return [read_raster(path)]


def load_reference_rasters(path):
    """Adapter for packaged evaluation arrays in the layout used by prior SDM code.

    The file is a pickled dict saved with ``np.save`` holding ``taxa``
    (species ids), ``obs_locs`` (K x 2 degrees, lon then lat),
    ``loc_indices_per_species`` and ``labels_per_species`` (per-species index
    and 0/1 arrays into ``obs_locs``). Other packagings are not supported.
    """
    d = np.load(path, allow_pickle=True)
    d = d.item() if d.dtype == object and d.shape == () else d
    locs = np.asarray(d["obs_locs"], dtype=np.float64)
    norm = np.stack([locs[:, 1] / 90.0, locs[:, 0] / 180.0], axis=1)
    rasters = []
    for taxon, idx, labels in zip(d["taxa"], d["loc_indices_per_species"], d["labels_per_species"]):
        idx = np.asarray(idx, dtype=np.int64)
        rasters.append(RangeRaster(str(int(taxon)) if np.issubdtype(type(taxon), np.integer) else str(taxon),
                                   norm[idx], np.asarray(labels) > 0))
    return rasters
