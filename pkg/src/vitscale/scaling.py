"""Greedy training-free growth of depth and width from a seed architecture."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .topology import ScaleSpec, TopologySpec

WIDTH_RATIOS = (1.05, 1.10, 1.15, 1.20)
N_STAGES = 4


@dataclass(frozen=True)
class ScalingChoice:
    ratio: float
    stage: int  # 0-based stage receiving one extra block

    @property
    def depth_delta(self) -> tuple[int, int, int, int]:
        return tuple(int(i == self.stage) for i in range(N_STAGES))


def enumerate_choices() -> list[ScalingChoice]:
    return [ScalingChoice(r, s) for r in WIDTH_RATIOS for s in range(N_STAGES)]


def scale_width(width: int, ratio: float, multiple: int = 1) -> int:
    """Nearest-integer growth, at least +1, rounded up to ``multiple``."""
    new = max(int(math.floor(width * ratio + 0.5)), width + 1)
    return -(-new // multiple) * multiple


def apply_choice(scale: ScaleSpec, choice: ScalingChoice, head_multiple: int = 1) -> ScaleSpec:
    depths = tuple(d + dd for d, dd in zip(scale.depths, choice.depth_delta))
    return ScaleSpec(depths, scale_width(scale.width, choice.ratio, head_multiple))


def rank_and_select(candidates) -> int:
    """Index of the candidate with the smallest rank sum.

    ``candidates`` is a sequence of ``(choice, LE, kappa_theta)``. Rank 1 is
    the largest LE and the smallest kappa_theta; tied values share their
    average rank. Rank-sum ties go to the better LE rank, then the smaller
    stage index, then the smaller width ratio.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    le = np.array([c[1] for c in candidates], dtype=np.float64)
    kt = np.array([c[2] for c in candidates], dtype=np.float64)
    if not (np.all(np.isfinite(le)) and np.all(np.isfinite(kt))):
        raise ValueError("candidate metrics must be finite")
    r_le = rankdata(-le, method="average")
    r_kt = rankdata(kt, method="average")
    total = r_le + r_kt

    def key(i):
        choice = candidates[i][0]
        stage = getattr(choice, "stage", 0)
        ratio = getattr(choice, "ratio", 0.0)
        return (total[i], r_le[i], stage, ratio)

    return min(range(len(candidates)), key=key)


@dataclass
class ScalingStep:
    step: int
    scale: ScaleSpec
    params: int
    LE: float
    kappa_theta: float
    choice: ScalingChoice | None
    candidates: list | None = None


def run_autoscale(
    topology: TopologySpec,
    seed_scale: ScaleSpec,
    budget: int,
    evaluator,
    param_counter,
    *,
    random_scaling: bool = False,
    rng=None,
    map_fn=map,
    max_steps: int = 10_000,
) -> list[ScalingStep]:
    """Grow ``seed_scale`` until the parameter count reaches ``budget``.

    ``evaluator(topology, scale) -> (LE, kappa_theta)`` scores an
    architecture and ``param_counter(topology, scale)`` sizes it. Each step
    scores all 16 width/depth choices (through ``map_fn``, which may be a
    pool's ``map``) and applies the one with the best rank sum, or a uniformly
    random one when ``random_scaling`` is set. The returned trajectory starts
    with the seed architecture.
    """
    seed_params = param_counter(topology, seed_scale)
    if budget <= seed_params:
        raise ValueError(
            f"budget {budget} must exceed the seed architecture's {seed_params} parameters"
        )
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    head_multiple = topology.stage_heads[0]
    le, kt = evaluator(topology, seed_scale)
    trajectory = [ScalingStep(0, seed_scale, seed_params, le, kt, None)]
    choices = enumerate_choices()
    scale, params = seed_scale, seed_params
    while params < budget and len(trajectory) <= max_steps:
        scales = [apply_choice(scale, c, head_multiple) for c in choices]
        scores = list(map_fn(_Scorer(evaluator, topology), scales))
        candidates = [(c, s[0], s[1]) for c, s in zip(choices, scores)]
        if random_scaling:
            idx = int(rng.integers(len(choices)))
        else:
            idx = rank_and_select(candidates)
        scale = scales[idx]
        params = param_counter(topology, scale)
        trajectory.append(
            ScalingStep(len(trajectory), scale, params, candidates[idx][1],
                        candidates[idx][2], choices[idx], candidates)
        )
    return trajectory


class _Scorer:
    """Picklable ``scale -> evaluator(topology, scale)`` adaptor for worker pools."""

    def __init__(self, evaluator, topology):
        self.evaluator = evaluator
        self.topology = topology

    def __call__(self, scale):
        return self.evaluator(self.topology, scale)


def nearest_by_params(trajectory: list[ScalingStep], target: int) -> ScalingStep:
    return min(trajectory, key=lambda s: abs(s.params - target))
