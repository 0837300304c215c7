"""Scikit-learn style front ends for topology search and auto-scaling."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from sklearn.base import BaseEstimator

from . import rng as rng_streams
from .complexity import Protocol
from .nn import param_count
from .scaling import run_autoscale
from .scoring import ArchitectureScorer
from .search import policy_entropy, run_search, top_candidates
from .topology import SEED_TOPOLOGY, ScaleSpec, SearchSpace
from .training import VitClassifier

__all__ = ["AutoScaler", "TopologySearch", "VitClassifier"]


class TopologySearch(BaseEstimator):
    """Policy-gradient topology search rewarded by length distortion and NTK conditioning.

    ``fit`` takes no data. After fitting, ``best_topology_`` holds the most
    probable topology, ``trajectory_`` one record per step and
    ``rescored_`` the top sampled candidates re-scored with ``rescore_seeds``
    initializations.
    """

    def __init__(self, steps=500, lr=0.05, baseline_decay=0.9, input_res=32, width=32,
                 samples=10, ntk_batch=8, rescore_top=5, rescore_seeds=5, space=None,
                 evaluator=None, random_state=0):
        self.steps = steps
        self.lr = lr
        self.baseline_decay = baseline_decay
        self.input_res = input_res
        self.width = width
        self.samples = samples
        self.ntk_batch = ntk_batch
        self.rescore_top = rescore_top
        self.rescore_seeds = rescore_seeds
        self.space = space
        self.evaluator = evaluator
        self.random_state = random_state

    def fit(self, X=None, y=None, policy=None, callback=None, history=None):
        """Run the search; ``policy`` and ``history`` resume an earlier run."""
        space = self.space or SearchSpace()
        scale = ScaleSpec((1, 1, 1, 1), self.width)
        scorer = ArchitectureScorer(self.input_res, self.samples, 1, None, self.ntk_batch,
                                    random_state=self.random_state)
        evaluator = self.evaluator or scorer.at_scale(scale)
        # keyed by the step count so a resumed run draws fresh samples
        start = policy.t if policy is not None else 0
        result = run_search(space, evaluator, self.steps,
                            rng_streams.stream(self.random_state, "policy", start),
                            self.lr, self.baseline_decay, policy=policy, callback=callback,
                            history=history)
        self.result_ = result
        self.best_topology_ = result.best
        self.policy_ = result.policy
        self.trajectory_ = result.trajectory
        self.initial_entropy_ = result.initial_entropy
        self.final_entropy_ = policy_entropy(result.policy)
        self.rescored_ = []
        if self.rescore_top and self.evaluator is None:
            full = Protocol(self.samples, self.rescore_seeds, None, self.ntk_batch)
            for spec in top_candidates(result, space, self.rescore_top):
                rep = scorer.report(spec, scale, metrics=("LE", "kappa_theta"), protocol=full)
                self.rescored_.append((spec, rep))
        return self


class AutoScaler(BaseEstimator):
    """Greedy depth/width growth of a topology until ``budget`` parameters.

    ``fit`` takes no data; ``trajectory_`` lists every intermediate
    architecture starting from the seed scale.
    """

    def __init__(self, topology=None, budget=2_000_000, depths=(1, 1, 1, 1), width=16,
                 input_res=32, samples=10, ntk_batch=8, random_scaling=False,
                 evaluator=None, n_jobs=1, random_state=0):
        self.topology = topology
        self.budget = budget
        self.depths = depths
        self.width = width
        self.input_res = input_res
        self.samples = samples
        self.ntk_batch = ntk_batch
        self.random_scaling = random_scaling
        self.evaluator = evaluator
        self.n_jobs = n_jobs
        self.random_state = random_state

    def fit(self, X=None, y=None):
        topology = self.topology or SEED_TOPOLOGY
        evaluator = self.evaluator or ArchitectureScorer(
            self.input_res, self.samples, 1, None, self.ntk_batch,
            random_state=self.random_state,
        )
        rng = rng_streams.stream(self.random_state, "scaling-ties")
        seed_scale = ScaleSpec(self.depths, self.width)
        if self.n_jobs and self.n_jobs > 1:
            with ProcessPoolExecutor(self.n_jobs) as pool:
                traj = run_autoscale(topology, seed_scale, self.budget, evaluator, param_count,
                                     random_scaling=self.random_scaling, rng=rng,
                                     map_fn=pool.map)
        else:
            traj = run_autoscale(topology, seed_scale, self.budget, evaluator, param_count,
                                 random_scaling=self.random_scaling, rng=rng)
        self.trajectory_ = traj
        self.final_scale_ = traj[-1].scale
        return self
