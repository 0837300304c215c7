"""Topology search space, architecture specs and the architecture document format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

SCHEMA_VERSION = 1

# name -> allowed values, in a fixed order that every other module relies on
DEFAULT_CHOICES: dict[str, tuple[int, ...]] = {
    "K1": (4, 5, 6, 7, 8),
    "S1": (2, 4, 8),
    "E1": (2, 3, 4, 5, 6),
    "K2": (2, 3, 4),
    "S2": (1, 2, 4),
    "E2": (2, 3, 4, 5, 6),
    "K3": (2, 3, 4),
    "S3": (1, 2),
    "E3": (2, 3, 4, 5, 6),
    "K4": (2, 3, 4),
    "E4": (2, 3, 4, 5, 6),
    "heads": (16, 32, 64),
}
DIMENSIONS = tuple(DEFAULT_CHOICES)


class SchemaError(ValueError):
    """Raised for malformed or incompatible architecture documents."""


@dataclass(frozen=True)
class TopologySpec:
    K1: int
    K2: int
    K3: int
    K4: int
    S1: int
    S2: int
    S3: int
    E1: int
    E2: int
    E3: int
    E4: int
    heads: int

    @property
    def kernels(self) -> tuple[int, int, int, int]:
        return (self.K1, self.K2, self.K3, self.K4)

    @property
    def splits(self) -> tuple[int, int, int, int]:
        # the last stage always runs global attention
        return (self.S1, self.S2, self.S3, 1)

    @property
    def expansions(self) -> tuple[int, int, int, int]:
        return (self.E1, self.E2, self.E3, self.E4)

    @property
    def stage_heads(self) -> tuple[int, int, int, int]:
        """Heads double per stage; ``heads`` is the stage-4 count."""
        return tuple(max(1, self.heads // 2 ** (3 - i)) for i in range(4))

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in DIMENSIONS}


@dataclass(frozen=True)
class ScaleSpec:
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(self.depths) != 4:
            raise ValueError(f"expected 4 stage depths, got {self.depths}")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"stage depths must be >= 1, got {self.depths}")
        if self.width < 1:
            raise ValueError(f"width must be positive, got {self.width}")

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        return tuple(self.width * 2**i for i in range(4))


# Searched seed topology with its per-stage head count of 32 at stage 4.
SEED_TOPOLOGY = TopologySpec(
    K1=8, K2=4, K3=4, K4=4, S1=2, S2=1, S3=1, E1=3, E2=2, E3=4, E4=6, heads=32
)
SEED_SCALE = ScaleSpec((1, 1, 1, 1), 32)
PUBLISHED_SCALES = {
    "small": ScaleSpec((3, 1, 4, 2), 88),
    "base": ScaleSpec((3, 1, 5, 2), 116),
    "large": ScaleSpec((5, 2, 5, 2), 180),
}


@dataclass(frozen=True)
class SearchSpace:
    choices: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_CHOICES)
    )

    @property
    def dimensions(self) -> tuple[str, ...]:
        return tuple(self.choices)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.choices.values())

    def spec_from_indices(self, indices) -> TopologySpec:
        """Build a topology from one index per dimension.

        Dimensions missing from a reduced space fall back to the seed topology.
        """
        values = SEED_TOPOLOGY.as_dict()
        for name, idx in zip(self.dimensions, indices):
            values[name] = self.choices[name][int(idx)]
        return TopologySpec(**values)

    def indices_of(self, spec: TopologySpec) -> tuple[int, ...]:
        return tuple(
            self.choices[name].index(getattr(spec, name)) for name in self.dimensions
        )


def validate(spec: TopologySpec, space: SearchSpace | None = None) -> list[str]:
    """Return the names of out-of-range fields; an empty list means valid."""
    space = space or SearchSpace()
    bad = []
    for name in DIMENSIONS:
        allowed = space.choices.get(name, DEFAULT_CHOICES[name])
        if getattr(spec, name) not in allowed:
            bad.append(name)
    return bad


def check_scale(scale: ScaleSpec, topology: TopologySpec) -> None:
    """Raise if ``scale`` gives fractional per-head dimensions for ``topology``."""
    stage1_heads = topology.stage_heads[0]
    if scale.width % stage1_heads:
        raise ValueError(
            f"width {scale.width} is not divisible by the stage-1 head count "
            f"{stage1_heads}"
        )


def space_size(space: SearchSpace | None = None) -> int:
    space = space or SearchSpace()
    return math.prod(space.cardinalities)


def sample_uniform(space: SearchSpace | None = None, seed=None) -> TopologySpec:
    space = space or SearchSpace()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = [rng.integers(n) for n in space.cardinalities]
    return space.spec_from_indices(idx)


def encode(spec: TopologySpec, scale: ScaleSpec, seed: int = 0) -> str:
    doc = {
        "topology": spec.as_dict(),
        "scale": {
            "L1": scale.depths[0],
            "L2": scale.depths[1],
            "L3": scale.depths[2],
            "L4": scale.depths[3],
            "C": scale.width,
        },
        "meta": {"seed": int(seed), "schema_version": SCHEMA_VERSION},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _exact_keys(section: dict, expected, where: str) -> None:
    if not isinstance(section, dict):
        raise SchemaError(f"'{where}' must be a mapping")
    missing = [k for k in expected if k not in section]
    extra = sorted(set(section) - set(expected))
    if missing:
        raise SchemaError(f"'{where}' is missing fields: {', '.join(missing)}")
    if extra:
        raise SchemaError(f"'{where}' has unknown fields: {', '.join(extra)}")
    for k in expected:
        v = section[k]
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(f"'{where}.{k}' must be an integer, got {v!r}")


def decode_document(text: str) -> tuple[TopologySpec, ScaleSpec, dict]:
    """Parse an architecture document into ``(topology, scale, meta)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not a valid architecture document: {exc}") from None
    top_keys = {"topology", "scale", "meta"}
    if not isinstance(doc, dict):
        raise SchemaError("architecture document must be a mapping")
    if set(doc) != top_keys:
        raise SchemaError(
            f"expected top-level keys {sorted(top_keys)}, got {sorted(doc)}"
        )
    _exact_keys(doc["meta"], ("seed", "schema_version"), "meta")
    if doc["meta"]["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(
            f"schema_version {doc['meta']['schema_version']} is not supported "
            f"(expected {SCHEMA_VERSION})"
        )
    _exact_keys(doc["topology"], DIMENSIONS, "topology")
    _exact_keys(doc["scale"], ("L1", "L2", "L3", "L4", "C"), "scale")
    spec = TopologySpec(**doc["topology"])
    bad = validate(spec)
    if bad:
        raise SchemaError(f"topology fields out of range: {', '.join(bad)}")
    s = doc["scale"]
    try:
        scale = ScaleSpec((s["L1"], s["L2"], s["L3"], s["L4"]), s["C"])
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    return spec, scale, dict(doc["meta"])


def decode(text: str) -> tuple[TopologySpec, ScaleSpec]:
    spec, scale, _ = decode_document(text)
    return spec, scale


def spec_hash(spec: TopologySpec, scale: ScaleSpec | None = None) -> str:
    """Short stable digest used as a row key in CSV outputs."""
    payload = {"topology": spec.as_dict()}
    if scale is not None:
        payload["scale"] = asdict(scale)
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


__all__ = [
    "DEFAULT_CHOICES",
    "DIMENSIONS",
    "PUBLISHED_SCALES",
    "SCHEMA_VERSION",
    "SEED_SCALE",
    "SEED_TOPOLOGY",
    "ScaleSpec",
    "SchemaError",
    "SearchSpace",
    "TopologySpec",
    "check_scale",
    "decode",
    "decode_document",
    "encode",
    "sample_uniform",
    "space_size",
    "spec_hash",
    "validate",
]
