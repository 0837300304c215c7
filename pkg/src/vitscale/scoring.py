"""Complexity scoring of concrete architectures with paired inputs."""

from __future__ import annotations

import math

from sklearn.base import BaseEstimator

from . import rng as rng_streams
from .complexity import METRICS, CircleBasis, ComplexityReport, Protocol, evaluate
from .nn import build_network
from .topology import ScaleSpec, TopologySpec


class ArchitectureScorer(BaseEstimator):
    """Scores ``(topology, scale)`` pairs on one fixed circle basis and NTK batch.

    Calling the scorer returns ``(LE, kappa_theta)``, the pair that drives
    both the topology search and auto-scaling. ``report`` returns every
    metric with per-seed detail.

    Parameters
    ----------
    input_res : int
        Image side fed to the networks.
    samples, seeds, step, ntk_batch, length_form
        Evaluation protocol; see :class:`vitscale.complexity.Protocol`.
    random_state : int
        Global seed for the basis, NTK inputs and network initializations.
    """

    def __init__(self, input_res=32, samples=10, seeds=1, step=None, ntk_batch=8,
                 length_form="sqrt", random_state=0):
        self.input_res = input_res
        self.samples = samples
        self.seeds = seeds
        self.step = step
        self.ntk_batch = ntk_batch
        self.length_form = length_form
        self.random_state = random_state

    @property
    def protocol(self) -> Protocol:
        return Protocol(self.samples, self.seeds, self.step, self.ntk_batch, self.length_form)

    def _inputs(self):
        if not hasattr(self, "_basis"):
            n = 3 * self.input_res**2
            self._basis = CircleBasis.random(n, rng_streams.stream(self.random_state, "basis"))
            self._ntk = rng_streams.stream(self.random_state, "ntk").standard_normal(
                (self.ntk_batch, n)
            )
        return self._basis, self._ntk

    def report(self, topology: TopologySpec, scale: ScaleSpec, metrics=METRICS,
               protocol: Protocol | None = None) -> ComplexityReport:
        basis, ntk = self._inputs()

        def factory(seed):
            return build_network(topology, scale, seed, self.input_res)

        return evaluate(factory, protocol or self.protocol, basis=basis, ntk_inputs=ntk,
                        seed=self.random_state, metrics=metrics)

    def __call__(self, topology: TopologySpec, scale: ScaleSpec) -> tuple[float, float]:
        rep = self.report(topology, scale, metrics=("LE", "kappa_theta"))
        if not (math.isfinite(rep.LE) and math.isfinite(rep.kappa_theta)):
            raise FloatingPointError("non-finite complexity metrics")
        return rep.LE, rep.kappa_theta

    def at_scale(self, scale: ScaleSpec) -> FixedScaleEvaluator:
        return FixedScaleEvaluator(self, scale)


class FixedScaleEvaluator:
    """``topology -> (LE, kappa_theta)`` at a fixed depth/width, as the search expects."""

    def __init__(self, scorer: ArchitectureScorer, scale: ScaleSpec):
        self.scorer = scorer
        self.scale = scale

    def __call__(self, topology: TopologySpec) -> tuple[float, float]:
        return self.scorer(topology, self.scale)
