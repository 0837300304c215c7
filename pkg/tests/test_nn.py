import numpy as np
import pytest
import torch
from torch import nn
from torch.utils.flop_counter import FlopCounterMode

from oracles import LAYERS, fd_check, randomize, sample
from vitscale.nn import (
    Block,
    FeedForward,
    OverlapProjection,
    WindowAttention,
    build_network,
    conv_padding,
    count_flops,
    count_params,
    forward,
    init_parameters,
    param_count,
    param_gradients,
)
from vitscale.topology import PUBLISHED_SCALES, SEED_TOPOLOGY, ScaleSpec

DESK = ScaleSpec((1, 1, 1, 1), 16)
LARGE_PARAMS_1K = 124_520_860  # 224 px, 1000-class head; regression constant


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_gradients_match_finite_differences(name):
    make, inputs = LAYERS[name]
    module = randomize(make().double())
    assert fd_check(module, inputs()) <= 1e-4


def test_full_network_gradient_matches_finite_differences():
    net = build_network(SEED_TOPOLOGY, DESK, seed=3, input_res=32, num_classes=5)

    class Head(nn.Module):
        def __init__(self):
            super().__init__()
            self.net = net

        def forward(self, x):
            return self.net.classify(x) ** 2

    x = sample(2, 3, 32, 32)
    assert fd_check(Head(), x, n_params=120) <= 1e-4


def test_param_gradients_linear_outer_product():
    lin = nn.Linear(3, 2, bias=False).double()
    x = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]])
    g = param_gradients(lin, x)
    expected = np.outer(np.ones(2), x.sum(axis=0)).ravel()
    np.testing.assert_allclose(g, expected, rtol=0, atol=1e-14)


def test_zero_input_gives_zero_first_projection_weight_gradient():
    net = build_network(SEED_TOPOLOGY, DESK, seed=0)
    g = param_gradients(net, np.zeros((1, 3, 32, 32)))
    w = net.stages[0].projection.weight.numel()
    assert np.all(g[:w] == 0.0)


def test_counts_of_lone_layers():
    assert count_params(nn.Linear(4, 8)) == 40
    assert count_params(nn.LayerNorm(16)) == 32


def test_large_parameter_count_regression():
    assert param_count(SEED_TOPOLOGY, PUBLISHED_SCALES["large"], 1000) == LARGE_PARAMS_1K
    # the published figure is 88.1M; see the decisions ledger for the gap
    assert 80e6 < LARGE_PARAMS_1K < 130e6


def test_meta_count_matches_materialised_count():
    net = build_network(SEED_TOPOLOGY, DESK, num_classes=10)
    assert param_count(SEED_TOPOLOGY, DESK, 10) == count_params(net)


@pytest.mark.parametrize("res,classes,stride", [(32, 0, None), (64, 10, None), (64, 10, 16),
                                                (32, 0, 8)])
def test_flops_match_torch_counter(res, classes, stride):
    topo = SEED_TOPOLOGY
    net = build_network(topo, ScaleSpec((2, 1, 1, 1), 16), input_res=res, num_classes=classes)
    x = torch.zeros(1, 3, res, res, dtype=torch.float64)
    counter = FlopCounterMode(display=False)
    dilation = {None: 1, 8: 2, 16: 5}[stride]
    with counter, torch.no_grad():
        if classes:
            net.classify(x, stride, dilation)
        else:
            net(x, stride, dilation)
    assert count_flops(net, stride_override=stride) == counter.get_total_flops() // 2


def test_attention_mixing_is_quadratic_in_tokens():
    attn = WindowAttention(16, 2, 1)
    mixing = lambda h, w: attn.flops(h, w) - 4 * h * w * 16 * 16
    assert mixing(8, 8) == 4 * mixing(4, 8)


def test_ffn_flops_linear_in_tokens():
    ffn = FeedForward(16, 4)
    assert ffn.flops(32) == 2 * ffn.flops(16)


def test_softmax_rows_and_layernorm_moments():
    attn = randomize(WindowAttention(8, 2, 2).double(), std=1.0)
    (x,) = sample(3, 16, 8)
    probs, _ = attn.attention_weights(x)
    np.testing.assert_allclose(probs.sum(-1).detach().numpy(), 1.0, atol=1e-12)
    net = build_network(SEED_TOPOLOGY, DESK)
    ln = net.stages[1].blocks[0].norm1
    (z,) = sample(50, ln.normalized_shape[0])
    z = z * 7 + 3
    out = torch.nn.functional.layer_norm(z, ln.normalized_shape, eps=ln.eps)
    assert out.mean(-1).abs().max() <= 1e-10
    assert (out.var(-1, unbiased=False) - 1).abs().max() <= 1e-8


def test_padded_keys_receive_no_attention():
    attn = randomize(WindowAttention(8, 2, 2).double())
    (x,) = sample(1, 5, 5, 8)
    out = attn(x)
    # the top-left window is full; perturbing a token outside it leaves it unchanged
    x2 = x.clone()
    x2[0, 4, 4] += 1.0
    assert torch.equal(attn(x2)[0, :3, :3], out[0, :3, :3])


def test_determinism_and_finite_output():
    a = build_network(SEED_TOPOLOGY, DESK, seed=7)
    b = build_network(SEED_TOPOLOGY, DESK, seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    y1, y2 = forward(a, x), forward(a, x)
    assert np.array_equal(y1, y2)
    assert y1.shape == (2, 8 * 16) and np.linalg.norm(y1) > 0


def test_zero_network_zero_output():
    net = build_network(SEED_TOPOLOGY, DESK)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    assert np.all(forward(net, np.zeros((1, 3, 32, 32))) == 0)


def test_residual_path_with_zeroed_branches():
    net = build_network(SEED_TOPOLOGY, DESK, seed=1)
    with torch.no_grad():
        for stage in net.stages:
            for block in stage.blocks:
                for p in list(block.attn.parameters()) + list(block.ffn.parameters()):
                    p.zero_()
    x = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        h = x
        for stage in net.stages:
            h = stage.norm(stage.projection(h).permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        expected = h.mean(dim=(2, 3))
        assert torch.allclose(net(x), expected, atol=1e-12)


def test_published_small_structure():
    net = build_network(SEED_TOPOLOGY, PUBLISHED_SCALES["small"], input_res=32)
    assert [len(s.blocks) for s in net.stages] == [3, 1, 4, 2]
    assert net.feature_dim == 8 * 88


def test_invalid_builds():
    with pytest.raises(ValueError):
        ScaleSpec(width=0)
    with pytest.raises(ValueError):
        build_network(SEED_TOPOLOGY, DESK, input_res=30)
    with pytest.raises(ValueError):
        forward(build_network(SEED_TOPOLOGY, DESK), np.zeros((1, 1, 32, 32)))


def test_flat_circle_input_accepted():
    net = build_network(SEED_TOPOLOGY, DESK)
    x = np.random.default_rng(0).standard_normal((2, 3 * 32 * 32))
    assert np.array_equal(forward(net, x), forward(net, x.reshape(2, 3, 32, 32)))


@pytest.mark.parametrize("size,kernel,stride,dilation", [(32, 8, 4, 1), (32, 8, 16, 5),
                                                        (16, 4, 2, 1), (7, 3, 2, 1)])
def test_padding_tiles_output(size, kernel, stride, dilation):
    before, after = conv_padding(size, kernel, stride, dilation)
    extent = dilation * (kernel - 1) + 1
    out = (size + before + after - extent) // stride + 1
    assert out == -(-size // stride)


def test_init_is_seeded():
    a, b = nn.Linear(4, 4), nn.Linear(4, 4)
    init_parameters(a, 3)
    init_parameters(b, 3)
    assert torch.equal(a.weight, b.weight)
    assert a.weight.abs().max() <= 0.04 and torch.all(a.bias == 0)
