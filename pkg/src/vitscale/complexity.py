"""Training-free complexity of a network at initialization.

A circle ``h(theta) = sqrt(N) (u0 cos theta + u1 sin theta)`` is pushed through
the network and the output curve is summarised by its curvature, its length
distortion and the curvature-aware length distortion. Derivatives along
``theta`` use central differences; integrals are left Riemann sums over
``M`` uniformly spaced angles. Trainability is scored by the condition number
of the empirical NTK Gram matrix on a small batch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from torch import nn

from . import rng as rng_streams
from .nn import forward, param_gradients

TWO_PI = 2.0 * math.pi
DEGENERATE_NORM = 1e-12
PSD_TOLERANCE = 1e-10
METRICS = ("kappa", "LE", "LE_kappa", "kappa_theta")


class DegenerateCurveError(ArithmeticError):
    """The output curve has (numerically) zero velocity somewhere."""


class SingularKernelError(ArithmeticError):
    """The NTK Gram matrix is singular or not positive semi-definite."""


@dataclass(frozen=True)
class CircleBasis:
    u0: np.ndarray
    u1: np.ndarray

    def __post_init__(self):
        for name in ("u0", "u1"):
            v = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            object.__setattr__(self, name, v)
        if self.u0.shape != self.u1.shape:
            raise ValueError("basis vectors must have the same dimension")

    @property
    def N(self) -> int:
        return self.u0.size

    @classmethod
    def random(cls, n: int, seed=0) -> CircleBasis:
        """Orthonormalised pair of standard-normal vectors."""
        gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        q, _ = np.linalg.qr(gen.standard_normal((n, 2)))
        return cls(q[:, 0], q[:, 1])


def circle_point(basis: CircleBasis, theta):
    """``h(theta)``; a 1-D vector for scalar ``theta``, else one row per angle."""
    theta = np.asarray(theta, dtype=np.float64)
    pts = math.sqrt(basis.N) * (
        np.multiply.outer(np.cos(theta), basis.u0) + np.multiply.outer(np.sin(theta), basis.u1)
    )
    return pts


@dataclass(frozen=True)
class Protocol:
    samples: int = 10
    seeds: int = 5
    step: float | None = None
    ntk_batch: int = 8
    length_form: str = "sqrt"

    def __post_init__(self):
        if self.samples < 1 or self.seeds < 1:
            raise ValueError("samples and seeds must be >= 1")
        if self.ntk_batch < 2:
            raise ValueError("NTK batch must hold at least 2 inputs")
        if self.step is not None and self.step <= 0:
            raise ValueError("finite-difference step must be positive")
        if self.length_form not in ("sqrt", "conventional"):
            raise ValueError(f"unknown length_form {self.length_form!r}")

    @property
    def fd_step(self) -> float:
        return self.step if self.step is not None else 1e-3 * TWO_PI / self.samples

    @property
    def thetas(self) -> np.ndarray:
        return TWO_PI * np.arange(self.samples) / self.samples


def as_function(net):
    """Map a network or plain callable to ``f(X[B, N]) -> Y[B, D]`` on numpy arrays."""
    if isinstance(net, nn.Module):
        return lambda x: forward(net, x).reshape(len(x), -1)
    return lambda x: np.asarray(net(x), dtype=np.float64).reshape(len(x), -1)


def _outputs(f, basis, thetas, step, offsets):
    """Network outputs at ``theta + k * step`` for every k in ``offsets``; shape (len(offsets), M, D)."""
    grid = np.concatenate([np.asarray(thetas) + k * step for k in offsets])
    out = f(circle_point(basis, grid))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network outputs on the circle")
    return out.reshape(len(offsets), len(thetas), -1)


def jacobians_theta(net, basis: CircleBasis, theta, step: float):
    """Central-difference velocity ``v`` and acceleration ``a`` of the output curve at ``theta``."""
    if step <= 0:
        raise ValueError("step must be positive")
    scalar = np.ndim(theta) == 0
    thetas = np.atleast_1d(theta)
    ym, y0, yp = _outputs(as_function(net), basis, thetas, step, (-1, 0, 1))
    v = (yp - ym) / (2 * step)
    a = (yp - 2 * y0 + ym) / step**2
    return (v[0], a[0]) if scalar else (v, a)


def _check_velocity(v):
    norms = np.linalg.norm(v, axis=-1)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateCurveError(
            f"output velocity vanishes (min |v| = {norms.min():.3g})"
        )
    return norms


def _curvature_integrand(v, a):
    vv = np.einsum("md,md->m", v, v)
    aa = np.einsum("md,md->m", a, a)
    va = np.einsum("md,md->m", v, a)
    return np.sqrt(np.maximum(vv * aa - va**2, 0.0)) / vv**1.5


def _length_integrand(v, form="sqrt"):
    norms = np.linalg.norm(v, axis=-1)
    return np.sqrt(norms) if form == "sqrt" else norms


def _direction_change(v_minus, v_plus, step):
    vm = v_minus / np.linalg.norm(v_minus, axis=-1, keepdims=True)
    vp = v_plus / np.linalg.norm(v_plus, axis=-1, keepdims=True)
    return np.linalg.norm((vp - vm) / (2 * step), axis=-1)


def _riemann(values, samples):
    return TWO_PI / samples * float(np.sum(values))


def curve_metrics(net, basis: CircleBasis, protocol: Protocol, metrics=("kappa", "LE", "LE_kappa")):
    """All requested circle metrics from one batched set of forward passes."""
    f = as_function(net)
    h = protocol.fd_step
    thetas = protocol.thetas
    m = protocol.samples
    need_second = "kappa" in metrics or "LE_kappa" in metrics
    if need_second:
        y = _outputs(f, basis, thetas, h, (-2, -1, 0, 1, 2))
        v = (y[3] - y[1]) / (2 * h)
    else:
        y = _outputs(f, basis, thetas, h, (-1, 1))
        v = (y[1] - y[0]) / (2 * h)
    out = {}
    if "LE" in metrics:
        out["LE"] = _riemann(_length_integrand(v, protocol.length_form), m)
    if need_second:
        _check_velocity(v)
    if "kappa" in metrics:
        a = (y[3] - 2 * y[2] + y[1]) / h**2
        out["kappa"] = _riemann(_curvature_integrand(v, a), m)
    if "LE_kappa" in metrics:
        v_minus = (y[2] - y[0]) / (2 * h)
        v_plus = (y[4] - y[2]) / (2 * h)
        _check_velocity(v_minus)
        _check_velocity(v_plus)
        out["LE_kappa"] = _riemann(np.sqrt(_direction_change(v_minus, v_plus, h)), m)
    return out


def curvature(net, basis: CircleBasis, protocol: Protocol | None = None) -> float:
    return curve_metrics(net, basis, protocol or Protocol(seeds=1), ("kappa",))["kappa"]


def length_distortion(net, basis: CircleBasis, protocol: Protocol | None = None) -> float:
    return curve_metrics(net, basis, protocol or Protocol(seeds=1), ("LE",))["LE"]


def length_distortion_curv(net, basis: CircleBasis, protocol: Protocol | None = None) -> float:
    return curve_metrics(net, basis, protocol or Protocol(seeds=1), ("LE_kappa",))["LE_kappa"]


def ntk_matrix(net: nn.Module, batch) -> np.ndarray:
    """Empirical NTK Gram matrix ``G @ G.T`` of per-sample parameter gradients."""
    batch = np.asarray(batch, dtype=np.float64)
    grads = np.stack([param_gradients(net, x[None]) for x in batch])
    return grads @ grads.T


def condition_from_gram(theta: np.ndarray) -> float:
    eig = np.linalg.eigvalsh((theta + theta.T) / 2)
    lmax, lmin = eig[-1], eig[0]
    if not np.isfinite(lmax) or lmax <= 0:
        raise SingularKernelError("NTK matrix has no positive eigenvalue")
    if lmin <= PSD_TOLERANCE * lmax:
        raise SingularKernelError(
            f"NTK matrix is singular (lambda_min={lmin:.3g}, lambda_max={lmax:.3g})"
        )
    return float(lmax / lmin)


def ntk_condition(net: nn.Module, batch) -> float:
    """``lambda_max / lambda_min`` of the empirical NTK on ``batch``."""
    batch = np.asarray(batch)
    if len(batch) < 2:
        raise ValueError("NTK condition number needs at least 2 inputs")
    return condition_from_gram(ntk_matrix(net, batch))


def has_parameters(net) -> bool:
    return isinstance(net, nn.Module) and any(True for _ in net.parameters())


@dataclass
class ComplexityReport:
    kappa: float
    LE: float
    LE_kappa: float
    kappa_theta: float
    per_seed: list[dict] = field(default_factory=list)

    def rows(self, spec_hash: str = "") -> list[dict]:
        return [{"spec_hash": spec_hash, **row} for row in self.per_seed]


def evaluate(
    net_factory,
    protocol: Protocol | None = None,
    *,
    basis: CircleBasis | None = None,
    ntk_inputs=None,
    input_dim: int | None = None,
    seed: int = 0,
    metrics=METRICS,
) -> ComplexityReport:
    """Average the metrics over ``protocol.seeds`` initializations of ``net_factory(init_seed)``.

    ``basis`` and ``ntk_inputs`` default to draws from the ``basis`` and
    ``ntk`` streams of ``seed``; pass them explicitly to pair comparisons
    across networks. Networks without parameters report ``nan`` for
    ``kappa_theta``.
    """
    protocol = protocol or Protocol()
    per_seed = []
    for i in range(protocol.seeds):
        init_seed = rng_streams.derive_seed(seed, "init", i)
        net = net_factory(init_seed)
        if basis is None or (ntk_inputs is None and "kappa_theta" in metrics):
            n = input_dim or math.prod(getattr(net, "input_shape"))
            if basis is None:
                basis = CircleBasis.random(n, rng_streams.stream(seed, "basis"))
            if ntk_inputs is None:
                ntk_inputs = rng_streams.stream(seed, "ntk").standard_normal(
                    (protocol.ntk_batch, n)
                )
        start = time.perf_counter()
        try:
            row = dict.fromkeys(METRICS, float("nan"))
            row.update(curve_metrics(net, basis, protocol, [m for m in metrics if m != "kappa_theta"]))
            if "kappa_theta" in metrics and has_parameters(net):
                row["kappa_theta"] = ntk_condition(net, ntk_inputs)
        except (ArithmeticError, FloatingPointError) as exc:
            raise type(exc)(f"seed index {i}: {exc}") from exc
        row = {"seed": init_seed, **row, "wall_ms": 1e3 * (time.perf_counter() - start)}
        per_seed.append(row)
    means = {m: float(np.mean([r[m] for r in per_seed])) for m in METRICS}
    return ComplexityReport(per_seed=per_seed, **means)


__all__ = [
    "CircleBasis",
    "ComplexityReport",
    "DegenerateCurveError",
    "Protocol",
    "SingularKernelError",
    "circle_point",
    "condition_from_gram",
    "curvature",
    "curve_metrics",
    "evaluate",
    "jacobians_theta",
    "length_distortion",
    "length_distortion_curv",
    "ntk_condition",
    "ntk_matrix",
]
