"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np

STREAMS = ("data", "init", "dropout", "pseudoabsence", "shuffle", "cap", "probe")


def stream(seed, name):
    """Independent generator for ``name``; the same (seed, name) always matches."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
