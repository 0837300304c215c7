"""Named random streams derived from one global seed."""

import zlib

import numpy as np

STREAMS = ("policy", "init", "basis", "data", "scaling-ties", "ntk")


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``name`` (and optional sub-indices) under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _key(name), *index]))


def derive_seed(seed: int, name: str, *index: int) -> int:
    """Integer seed for libraries that take one (e.g. torch generators)."""
    ss = np.random.SeedSequence([int(seed), _key(name), *index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
