"""REINFORCE search over the topology space with a training-free reward."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .topology import SearchSpace, TopologySpec

logger = logging.getLogger(__name__)

RANGE_EPS = 1e-8


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class Policy:
    """Independent categorical distribution per search dimension."""

    logits: tuple[np.ndarray, ...]
    baseline: float = 0.0
    t: int = 0

    @classmethod
    def uniform(cls, space: SearchSpace) -> Policy:
        return cls(tuple(np.zeros(n) for n in space.cardinalities))

    @property
    def probs(self) -> list[np.ndarray]:
        return [_softmax(z) for z in self.logits]

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        return tuple(int(rng.choice(len(p), p=p)) for p in self.probs)

    def log_prob(self, indices) -> float:
        return float(sum(np.log(p[i]) for p, i in zip(self.probs, indices)))

    def argmax(self) -> tuple[int, ...]:
        return tuple(int(np.argmax(z)) for z in self.logits)

    def to_dict(self, space: SearchSpace) -> dict:
        return {
            "dimensions": list(space.dimensions),
            "logits": [z.tolist() for z in self.logits],
            "baseline": self.baseline,
            "t": self.t,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Policy:
        return cls(
            tuple(np.asarray(z, dtype=np.float64) for z in doc["logits"]),
            float(doc["baseline"]),
            int(doc["t"]),
        )


def policy_entropy(policy: Policy) -> float:
    """Joint entropy in nats (sum over the independent heads)."""
    total = 0.0
    for p in policy.probs:
        nz = p[p > 0]
        total -= float(np.sum(nz * np.log(nz)))
    return total


@dataclass
class RewardHistory:
    LE: list[float] = field(default_factory=list)
    kappa_theta: list[float] = field(default_factory=list)

    def append(self, le: float, kt: float) -> None:
        self.LE.append(float(le))
        self.kappa_theta.append(float(kt))

    def __len__(self) -> int:
        return len(self.LE)


def _normalized_delta(values, t):
    if t == 1:
        return 0.0
    seen = values[:t]
    span = max(max(seen) - min(seen), RANGE_EPS)
    return (seen[t - 1] - seen[t - 2]) / span


def normalize_reward(history: RewardHistory, t: int | None = None) -> tuple[float, float]:
    """Step-``t`` change of each metric divided by its observed range over steps 1..t.

    ``t`` is 1-based and defaults to the latest entry; at ``t == 1`` both
    deltas are zero.
    """
    t = len(history) if t is None else t
    if not 1 <= t <= len(history):
        raise ValueError(f"t={t} outside recorded history of length {len(history)}")
    return _normalized_delta(history.LE, t), _normalized_delta(history.kappa_theta, t)


@dataclass
class StepRecord:
    t: int
    spec: TopologySpec
    LE: float
    kappa_theta: float
    reward: float
    entropy: float
    failed: bool = False
    error: str = ""


def search_step(
    policy: Policy,
    evaluator,
    history: RewardHistory,
    rng: np.random.Generator,
    space: SearchSpace | None = None,
    lr: float = 0.05,
    baseline_decay: float = 0.9,
) -> tuple[Policy, StepRecord]:
    """Sample one topology, score it, and apply one REINFORCE update to the logits."""
    space = space or SearchSpace()
    indices = policy.sample(rng)
    spec = space.spec_from_indices(indices)
    t = policy.t + 1
    try:
        le, kt = evaluator(spec)
        if not (np.isfinite(le) and np.isfinite(kt)):
            raise FloatingPointError(f"non-finite metrics LE={le}, kappa_theta={kt}")
    except Exception as exc:  # evaluator failures skip the step
        logger.warning("step %d: evaluation of %s failed: %s", t, spec, exc)
        record = StepRecord(t, spec, float("nan"), float("nan"), 0.0,
                            policy_entropy(policy), failed=True, error=str(exc))
        return replace(policy, t=t), record

    history.append(le, kt)
    le_hat, kt_hat = normalize_reward(history)
    reward = le_hat - kt_hat
    advantage = reward - policy.baseline
    logits = []
    for z, p, i in zip(policy.logits, policy.probs, indices):
        grad_log = -p
        grad_log[i] += 1.0
        logits.append(z + lr * advantage * grad_log)
    baseline = baseline_decay * policy.baseline + (1 - baseline_decay) * reward
    new_policy = Policy(tuple(logits), baseline, t)
    record = StepRecord(t, spec, float(le), float(kt), reward, policy_entropy(new_policy))
    return new_policy, record


@dataclass
class SearchResult:
    best: TopologySpec
    policy: Policy
    trajectory: list[StepRecord]
    initial_entropy: float
    history: RewardHistory | None = None

    @property
    def final_entropy(self) -> float:
        return policy_entropy(self.policy)


def run_search(
    space: SearchSpace | None,
    evaluator,
    steps: int = 500,
    rng=None,
    lr: float = 0.05,
    baseline_decay: float = 0.9,
    policy: Policy | None = None,
    callback=None,
    history: RewardHistory | None = None,
) -> SearchResult:
    """Run ``steps`` policy-gradient updates and return the most probable topology.

    ``policy`` and ``history`` resume from a checkpoint; ``callback(record,
    policy)`` is called after every step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    space = space or SearchSpace()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    policy = policy or Policy.uniform(space)
    initial_entropy = policy_entropy(policy)
    history = history if history is not None else RewardHistory()
    trajectory = []
    for _ in range(steps):
        policy, record = search_step(policy, evaluator, history, rng, space, lr, baseline_decay)
        trajectory.append(record)
        if callback is not None:
            callback(record, policy)
    if all(r.failed for r in trajectory):
        raise RuntimeError("every search step failed to evaluate")
    best = space.spec_from_indices(policy.argmax())
    return SearchResult(best, policy, trajectory, initial_entropy, history)


def top_candidates(result: SearchResult, space: SearchSpace, k: int = 5) -> list[TopologySpec]:
    """The ``k`` distinct sampled topologies most probable under the final policy."""
    seen = {}
    for rec in result.trajectory:
        if not rec.failed:
            seen.setdefault(rec.spec, result.policy.log_prob(space.indices_of(rec.spec)))
    return sorted(seen, key=lambda s: -seen[s])[:k]
