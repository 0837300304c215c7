"""Multi-stage windowed ViT built at initialization, with gradient and cost helpers.

Networks run in float64 by default so that finite-difference based metrics
stay well conditioned. Every learnable piece is a plain ``torch.nn.Module``;
``count_flops`` mirrors the forward pass layer by layer and is checked
against ``torch.utils.flop_counter`` in the tests.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .topology import ScaleSpec, TopologySpec, check_scale

LN_EPS = 1e-12
INIT_STD = 0.02
STEM_STRIDE = 4
REEMBED_STRIDE = 2


def _out_size(size: int, stride: int) -> int:
    return -(-size // stride)


def conv_padding(size: int, kernel: int, stride: int, dilation: int = 1):
    """Zero padding (before, after) so that ``ceil(size / stride)`` windows tile the input.

    With ``dilation == 1`` and an even ``kernel - stride`` this is
    ``(kernel - stride) / 2`` per side.
    """
    extent = dilation * (kernel - 1) + 1
    out = _out_size(size, stride)
    total = max((out - 1) * stride + extent - size, 0)
    return total // 2, total - total // 2


class OverlapProjection(nn.Module):
    """Strided (optionally dilated) convolution embedding a grid into tokens."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(out_channels))

    def output_grid(self, h: int, w: int, stride: int | None = None) -> tuple[int, int]:
        stride = stride or self.stride
        return _out_size(h, stride), _out_size(w, stride)

    def forward(self, x, stride: int | None = None, dilation: int = 1):
        stride = stride or self.stride
        h, w = x.shape[-2:]
        extent = dilation * (self.kernel - 1) + 1
        ph = conv_padding(h, self.kernel, stride, dilation)
        pw = conv_padding(w, self.kernel, stride, dilation)
        if max(ph + pw) >= extent:
            raise ValueError(
                f"dilated kernel extent {extent} exceeds the padded {h}x{w} input "
                f"at stride {stride}"
            )
        x = F.pad(x, (pw[0], pw[1], ph[0], ph[1]))
        return F.conv2d(x, self.weight, self.bias, stride=stride, dilation=dilation)

    def flops(self, h: int, w: int, stride: int | None = None) -> int:
        oh, ow = self.output_grid(h, w, stride)
        return oh * ow * self.out_channels * self.in_channels * self.kernel**2


def window_size(size: int, splits: int) -> int:
    """Window side for ``splits`` partitions per axis (at least one token)."""
    return max(1, _out_size(size, splits))


def padded_size(size: int, splits: int) -> int:
    ws = window_size(size, splits)
    return _out_size(size, ws) * ws


class WindowAttention(nn.Module):
    """Multi-head self-attention restricted to non-overlapping local windows."""

    def __init__(self, dim: int, heads: int, splits: int = 1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.splits = splits
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attention_weights(self, x, key_mask=None):
        """Softmax attention probabilities for window batches ``x`` of shape (n, T, C)."""
        n, t, c = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return scores.softmax(dim=-1), v

    def forward(self, x):
        b, h, w, c = x.shape
        wh, ww = window_size(h, self.splits), window_size(w, self.splits)
        hp, wp = padded_size(h, self.splits), padded_size(w, self.splits)
        key_mask = None
        if (hp, wp) != (h, w):
            x = F.pad(x, (0, 0, 0, wp - w, 0, hp - h))
            valid = torch.zeros(hp, wp, dtype=torch.bool)
            valid[:h, :w] = True
            key_mask = _partition(valid[None, :, :, None], wh, ww)[..., 0].repeat(b, 1)
        windows = _partition(x, wh, ww)
        attn, v = self.attention_weights(windows, key_mask)
        out = (attn @ v).transpose(1, 2).reshape(windows.shape)
        out = self.proj(out)
        out = _unpartition(out, b, hp, wp, wh, ww)
        return out[:, :h, :w]

    def flops(self, h: int, w: int) -> int:
        hp, wp = padded_size(h, self.splits), padded_size(w, self.splits)
        tokens = hp * wp
        per_window = window_size(h, self.splits) * window_size(w, self.splits)
        linear = tokens * self.dim * 3 * self.dim + tokens * self.dim * self.dim
        # scores and weighted sum, each per_window^2 * dim per window
        mixing = 2 * tokens * per_window * self.dim
        return linear + mixing


def _partition(x, wh: int, ww: int):
    b, h, w, c = x.shape
    x = x.reshape(b, h // wh, wh, w // ww, ww, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, wh * ww, c)


def _unpartition(windows, b: int, h: int, w: int, wh: int, ww: int):
    c = windows.shape[-1]
    x = windows.reshape(b, h // wh, w // ww, wh, ww, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.dim = dim
        self.hidden = dim * expansion
        self.fc1 = nn.Linear(dim, self.hidden)
        self.fc2 = nn.Linear(self.hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))

    def flops(self, tokens: int) -> int:
        return 2 * tokens * self.dim * self.hidden


class Block(nn.Module):
    """Pre-norm transformer block over a (B, H, W, C) token grid."""

    def __init__(self, dim: int, heads: int, splits: int, expansion: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = WindowAttention(dim, heads, splits)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))

    def flops(self, h: int, w: int) -> int:
        return self.attn.flops(h, w) + self.ffn.flops(h * w)


class Stage(nn.Module):
    def __init__(self, in_channels, dim, kernel, stride, depth, heads, splits, expansion):
        super().__init__()
        self.projection = OverlapProjection(in_channels, dim, kernel, stride)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.blocks = nn.ModuleList(
            Block(dim, heads, splits, expansion) for _ in range(depth)
        )

    def forward(self, x, stride=None, dilation=1):
        x = self.projection(x, stride, dilation).permute(0, 2, 3, 1)
        x = self.norm(x)
        for block in self.blocks:
            x = block(x)
        return x


class VitNetwork(nn.Module):
    """Four-stage ViT with overlapping embeddings and windowed attention.

    ``forward`` returns globally average-pooled final-stage features of width
    ``8 * C``; ``classify`` adds a LayerNorm + linear head when
    ``num_classes > 0``.
    """

    def __init__(
        self,
        topology: TopologySpec,
        scale: ScaleSpec,
        seed: int = 0,
        input_res: int = 32,
        num_classes: int = 0,
        dtype=torch.float64,
    ):
        super().__init__()
        self.topology = topology
        self.scale = scale
        self.rng_seed = int(seed)
        self.input_res = input_res
        self.num_classes = num_classes
        self.input_shape = (3, input_res, input_res)
        widths = scale.stage_widths
        in_ch = 3
        stages = []
        for i in range(4):
            stages.append(
                Stage(
                    in_ch,
                    widths[i],
                    topology.kernels[i],
                    STEM_STRIDE if i == 0 else REEMBED_STRIDE,
                    scale.depths[i],
                    topology.stage_heads[i],
                    topology.splits[i],
                    topology.expansions[i],
                )
            )
            in_ch = widths[i]
        self.stages = nn.ModuleList(stages)
        self.feature_dim = widths[-1]
        if num_classes:
            self.head_norm = nn.LayerNorm(self.feature_dim, eps=LN_EPS)
            self.head = nn.Linear(self.feature_dim, num_classes)
        self.to(dtype)
        init_parameters(self, self.rng_seed)

    def _check_input(self, x):
        if x.ndim == 2 and x.shape[1] == math.prod(self.input_shape):
            x = x.reshape(x.shape[0], *self.input_shape)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(
                f"expected input of shape (batch, 3, H, W), got {tuple(x.shape)}"
            )
        return x

    def features(self, x, stem_stride=None, stem_dilation=1):
        x = self._check_input(x)
        for i, stage in enumerate(self.stages):
            if i == 0:
                x = stage(x, stem_stride, stem_dilation)
            else:
                x = stage(x.permute(0, 3, 1, 2))
        return x.mean(dim=(1, 2))

    def forward(self, x, stem_stride=None, stem_dilation=1):
        return self.features(x, stem_stride, stem_dilation)

    def classify(self, x, stem_stride=None, stem_dilation=1):
        if not self.num_classes:
            raise ValueError("network was built without a classification head")
        z = self.features(x, stem_stride, stem_dilation)
        return self.head(self.head_norm(z))

    def token_grids(self, input_res: int | None = None, stem_stride=None):
        """Token grid (h, w) entering each stage's blocks."""
        h = w = input_res or self.input_res
        grids = []
        for i, stage in enumerate(self.stages):
            h, w = stage.projection.output_grid(h, w, stem_stride if i == 0 else None)
            grids.append((h, w))
        return grids


def _truncated_normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws clipped to +-2 std by resampling the outliers."""
    x = gen.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return std * x


def init_parameters(module: nn.Module, seed: int) -> None:
    """Truncated-normal weights, zero biases, unit LayerNorm scales; deterministic in ``seed``."""
    gen = np.random.default_rng(int(seed))
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, (nn.Linear, OverlapProjection)):
                if mod.weight.device.type != "meta":
                    values = _truncated_normal(gen, tuple(mod.weight.shape), INIT_STD)
                    mod.weight.copy_(torch.from_numpy(values))
                if mod.bias is not None:
                    mod.bias.zero_()


def build_network(
    topology: TopologySpec,
    scale: ScaleSpec,
    seed: int = 0,
    input_res: int = 32,
    num_classes: int = 0,
    dtype=torch.float64,
) -> VitNetwork:
    if input_res <= 0 or input_res % (STEM_STRIDE * REEMBED_STRIDE**3):
        raise ValueError(
            f"input_res must be a positive multiple of "
            f"{STEM_STRIDE * REEMBED_STRIDE**3}, got {input_res}"
        )
    check_scale(scale, topology)
    return VitNetwork(topology, scale, seed, input_res, num_classes, dtype)


def as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(net: nn.Module, x) -> np.ndarray:
    """Evaluate ``net`` without tracking gradients and return a numpy array."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(as_tensor(x, dtype))
    out = out.numpy()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("network produced non-finite outputs")
    return out


def param_gradients(net: nn.Module, x, reduction: str = "sum") -> np.ndarray:
    """Exact gradient of the reduced output w.r.t. every parameter, flattened in ``named_parameters`` order."""
    if reduction != "sum":
        raise ValueError(f"unsupported reduction {reduction!r}")
    params = [p for p in net.parameters()]
    dtype = params[0].dtype
    out = net(as_tensor(x, dtype)).sum()
    if not torch.isfinite(out):
        raise FloatingPointError("non-finite network output")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    flat = torch.cat(
        [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, params)
        ]
    )
    flat = flat.detach().numpy()
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite gradient")
    return flat


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def param_count(topology: TopologySpec, scale: ScaleSpec, num_classes: int = 0) -> int:
    """Parameter count of an architecture without allocating its weights."""
    with torch.device("meta"):
        net = VitNetwork(topology, scale, 0, 32, num_classes)
    return count_params(net)


def count_flops(net: VitNetwork, input_res: int | None = None, stride_override=None) -> int:
    """Multiply-accumulate count of one forward pass for a single image.

    Covers stage projections, attention (QKV, scores, weighted sum, output
    projection), FFNs and the classifier head. Normalisations, activations and
    pooling are not counted.
    """
    h = w = input_res or net.input_res
    total = 0
    for i, stage in enumerate(net.stages):
        stride = stride_override if i == 0 else None
        total += stage.projection.flops(h, w, stride)
        h, w = stage.projection.output_grid(h, w, stride)
        for block in stage.blocks:
            total += block.flops(h, w)
    if net.num_classes:
        total += net.feature_dim * net.num_classes
    return total


__all__ = [
    "Block",
    "FeedForward",
    "LN_EPS",
    "OverlapProjection",
    "Stage",
    "VitNetwork",
    "WindowAttention",
    "as_tensor",
    "build_network",
    "conv_padding",
    "count_flops",
    "count_params",
    "forward",
    "init_parameters",
    "param_count",
    "param_gradients",
]
