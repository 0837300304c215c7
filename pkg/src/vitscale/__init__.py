"""Training-free design, ranking and scaling of windowed vision transformers."""

__version__ = "0.1.0"

from .complexity import CircleBasis, ComplexityReport, Protocol, evaluate  # noqa: E402
from .nn import VitNetwork, build_network, count_flops, count_params  # noqa: E402
from .scoring import ArchitectureScorer  # noqa: E402
from .topology import ScaleSpec, SearchSpace, TopologySpec  # noqa: E402

__all__ = [
    "ArchitectureScorer",
    "CircleBasis",
    "ComplexityReport",
    "Protocol",
    "ScaleSpec",
    "SearchSpace",
    "TopologySpec",
    "VitNetwork",
    "build_network",
    "count_flops",
    "count_params",
    "evaluate",
]
