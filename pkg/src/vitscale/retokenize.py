"""Progressive elastic re-tokenization of the first projection.

Coarser tokenization is obtained by raising the stem stride and dilating the
same kernel so its receptive field roughly keeps up; weights never change
shape. A phase is named by its per-axis reduction factor: factor 2 runs the
stem at twice its native stride (4x fewer tokens), factor 4 at four times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from torch import nn

from .nn import STEM_STRIDE, VitNetwork, build_network, count_flops
from .topology import SEED_TOPOLOGY, ScaleSpec

REDUCTION_FACTORS = (1, 2, 4)

# Reference network for FLOPs ratios: seed topology at search scale, 64px,
# with a 1000-way classifier head.
REFERENCE_RES = 64
REFERENCE_CLASSES = 1000


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def dilation_for_stride(stride: int, kernel: int, base_stride: int = STEM_STRIDE) -> int:
    """``round((stride / base_stride - 1) * kernel / (kernel - 1)) + 1``, halves away from zero."""
    if kernel <= 1:
        raise ValueError("kernel must be larger than 1 to dilate")
    if stride <= 0 or stride % base_stride:
        raise ValueError(f"stride {stride} is not a positive multiple of {base_stride}")
    return _round_half_away((stride / base_stride - 1) * kernel / (kernel - 1)) + 1


@dataclass(frozen=True)
class TokenPhase:
    stride: int
    dilation: int
    epoch_start: int
    epoch_end: int

    @property
    def epochs(self) -> int:
        return self.epoch_end - self.epoch_start + 1

    def factor(self, base_stride: int = STEM_STRIDE) -> int:
        return self.stride // base_stride

    def as_dict(self) -> dict:
        return {
            "stride": self.stride,
            "dilation": self.dilation,
            "epoch_start": self.epoch_start,
            "epoch_end": self.epoch_end,
        }


def make_phase(factor: int, epoch_start: int, epoch_end: int, kernel: int,
               base_stride: int = STEM_STRIDE) -> TokenPhase:
    if factor not in REDUCTION_FACTORS:
        raise ValueError(f"reduction factor must be one of {REDUCTION_FACTORS}, got {factor}")
    if epoch_end < epoch_start:
        raise ValueError(f"empty epoch range {epoch_start}-{epoch_end}")
    stride = base_stride * factor
    return TokenPhase(stride, dilation_for_stride(stride, kernel, base_stride),
                      epoch_start, epoch_end)


@dataclass(frozen=True)
class TokenSchedule:
    phases: tuple[TokenPhase, ...]
    kernel: int
    base_stride: int = STEM_STRIDE

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        check_schedule(self)

    @classmethod
    def from_factors(cls, spans, kernel: int, base_stride: int = STEM_STRIDE) -> TokenSchedule:
        """Build from ``[(factor, epoch_start, epoch_end), ...]``."""
        return cls(tuple(make_phase(f, a, b, kernel, base_stride) for f, a, b in spans),
                   kernel, base_stride)

    @property
    def total_epochs(self) -> int:
        return self.phases[-1].epoch_end

    def phase_at(self, epoch: int) -> TokenPhase:
        """Phase covering the 1-based ``epoch``."""
        for phase in self.phases:
            if phase.epoch_start <= epoch <= phase.epoch_end:
                return phase
        raise ValueError(f"epoch {epoch} is not covered by the schedule")

    def as_list(self) -> list[dict]:
        return [p.as_dict() for p in self.phases]


def check_schedule(schedule: TokenSchedule, total_epochs: int | None = None) -> None:
    phases = schedule.phases
    if not phases:
        raise ValueError("schedule has no phases")
    legal = {schedule.base_stride * f for f in REDUCTION_FACTORS}
    expected_start = 1
    for p in phases:
        if p.stride not in legal:
            raise ValueError(f"stride {p.stride} is not one of {sorted(legal)}")
        want = dilation_for_stride(p.stride, schedule.kernel, schedule.base_stride)
        if p.dilation != want:
            raise ValueError(f"stride {p.stride} needs dilation {want}, got {p.dilation}")
        if p.epoch_start != expected_start:
            kind = "overlap" if p.epoch_start < expected_start else "gap"
            raise ValueError(f"epoch {kind} before phase starting at {p.epoch_start}")
        if p.epoch_end < p.epoch_start:
            raise ValueError(f"empty epoch range {p.epoch_start}-{p.epoch_end}")
        expected_start = p.epoch_end + 1
    strides = [p.stride for p in phases]
    if any(a < b for a, b in zip(strides, strides[1:])):
        raise ValueError("phase strides must not increase (coarse to fine)")
    if strides[-1] != schedule.base_stride:
        raise ValueError("the final phase must run at full token resolution")
    if total_epochs is not None and phases[-1].epoch_end != total_epochs:
        raise ValueError(
            f"schedule covers epochs 1-{phases[-1].epoch_end}, expected 1-{total_epochs}"
        )


def reference_network() -> VitNetwork:
    return build_network(SEED_TOPOLOGY, ScaleSpec((1, 1, 1, 1), 32), 0,
                         REFERENCE_RES, REFERENCE_CLASSES)


def flops_ratio(net: VitNetwork, reduction_factor: int) -> float:
    """Per-image FLOPs with the stem at ``factor`` x its stride, relative to full resolution."""
    if reduction_factor not in REDUCTION_FACTORS:
        raise ValueError(
            f"reduction factor must be one of {REDUCTION_FACTORS}, got {reduction_factor}"
        )
    base = net.stages[0].projection.stride
    return count_flops(net, stride_override=base * reduction_factor) / count_flops(net)


def schedule_savings(schedule: TokenSchedule, total_epochs: int, net: VitNetwork) -> float:
    """Percentage of training FLOPs saved against running every epoch at full resolution."""
    check_schedule(schedule, total_epochs)
    used = sum(p.epochs * flops_ratio(net, p.factor(schedule.base_stride))
               for p in schedule.phases)
    return 100.0 * (1.0 - used / total_epochs)


class TokenizedView(nn.Module):
    """The same network with its stem run at a different (stride, dilation)."""

    def __init__(self, net: VitNetwork, stride: int, dilation: int):
        super().__init__()
        self.net = net
        self.stride = stride
        self.dilation = dilation
        self.input_shape = net.input_shape

    def forward(self, x):
        return self.net(x, stem_stride=self.stride, stem_dilation=self.dilation)

    def classify(self, x):
        return self.net.classify(x, stem_stride=self.stride, stem_dilation=self.dilation)

    def token_grids(self, input_res: int | None = None):
        return self.net.token_grids(input_res, self.stride)


def apply_phase(net: VitNetwork, phase: TokenPhase) -> nn.Module:
    """View of ``net`` tokenized per ``phase``; the full-resolution phase returns ``net`` itself."""
    stem = net.stages[0].projection
    if phase.stride % stem.stride or phase.stride // stem.stride not in REDUCTION_FACTORS:
        raise ValueError(f"stride {phase.stride} is not legal for stem stride {stem.stride}")
    if phase.dilation != dilation_for_stride(phase.stride, stem.kernel, stem.stride):
        raise ValueError(f"dilation {phase.dilation} does not match stride {phase.stride}")
    if phase.stride == stem.stride:
        return net
    return TokenizedView(net, phase.stride, phase.dilation)


# Token-reduction schedules of the efficient-training study (300 epochs).
PUBLISHED_SCHEDULES = {
    "short": [(4, 1, 40), (2, 41, 70), (1, 71, 300)],
    "medium": [(4, 1, 80), (2, 81, 140), (1, 141, 300)],
    "long": [(4, 1, 120), (2, 121, 210), (1, 211, 300)],
}
PUBLISHED_SAVINGS = {"short": 18.7, "medium": 37.4, "long": 56.2}
