import numpy as np
import pytest
import torch

from vitscale.nn import build_network, count_params
from vitscale.retokenize import (
    PUBLISHED_SAVINGS,
    PUBLISHED_SCHEDULES,
    TokenPhase,
    TokenSchedule,
    apply_phase,
    dilation_for_stride,
    flops_ratio,
    make_phase,
    reference_network,
    schedule_savings,
)
from vitscale.topology import SEED_TOPOLOGY, ScaleSpec, TopologySpec

S1_4 = TopologySpec(K1=4, K2=4, K3=4, K4=4, S1=4, S2=1, S3=1, E1=3, E2=2, E3=4, E4=6, heads=32)


@pytest.mark.parametrize("stride,dilation", [(16, 5), (8, 2), (4, 1)])
def test_dilation_pairs(stride, dilation):
    assert dilation_for_stride(stride, 4, 4) == dilation


def test_dilation_rejects_bad_input():
    with pytest.raises(ValueError):
        dilation_for_stride(6, 4)
    with pytest.raises(ValueError):
        dilation_for_stride(8, 1)


def test_flops_ratios():
    net = reference_network()
    r1, r2, r4 = (flops_ratio(net, f) for f in (1, 2, 4))
    assert r1 == 1.0
    assert r4 == pytest.approx(0.132, abs=0.03)
    assert r2 == pytest.approx(0.287, abs=0.06)
    assert r1 > r2 > r4
    with pytest.raises(ValueError):
        flops_ratio(net, 3)


@pytest.mark.parametrize("name", sorted(PUBLISHED_SCHEDULES))
def test_published_schedule_savings(name):
    sched = TokenSchedule.from_factors(PUBLISHED_SCHEDULES[name], SEED_TOPOLOGY.K1)
    saving = schedule_savings(sched, 300, reference_network())
    assert saving == pytest.approx(PUBLISHED_SAVINGS[name], abs=2.0)


def test_full_resolution_schedule_saves_nothing():
    sched = TokenSchedule.from_factors([(1, 1, 300)], 8)
    assert schedule_savings(sched, 300, reference_network()) == 0.0


@pytest.mark.parametrize("spans,match", [
    ([(4, 1, 40), (2, 30, 70), (1, 71, 300)], "overlap"),
    ([(4, 1, 40), (2, 45, 70), (1, 71, 300)], "gap"),
    ([(1, 1, 40), (4, 41, 300)], "increase"),
    ([(4, 1, 40), (2, 41, 300)], "full token resolution"),
    ([(3, 1, 300)], "reduction factor"),
])
def test_illegal_schedules(spans, match):
    with pytest.raises(ValueError, match=match):
        TokenSchedule.from_factors(spans, 8)


def test_schedule_must_cover_total_epochs():
    sched = TokenSchedule.from_factors([(4, 1, 10), (1, 11, 200)], 8)
    with pytest.raises(ValueError, match="expected 1-300"):
        schedule_savings(sched, 300, reference_network())


def test_mismatched_dilation_rejected():
    with pytest.raises(ValueError, match="dilation"):
        TokenSchedule((TokenPhase(16, 3, 1, 10), TokenPhase(4, 1, 11, 20)), 8)


def test_phase_lookup():
    sched = TokenSchedule.from_factors(PUBLISHED_SCHEDULES["short"], 8)
    assert sched.phase_at(1).stride == 16
    assert sched.phase_at(41).stride == 8
    assert sched.phase_at(300).stride == 4
    with pytest.raises(ValueError):
        sched.phase_at(301)


def test_coarse_phase_token_grid():
    net = build_network(S1_4, ScaleSpec(width=16), input_res=32)
    assert net.token_grids()[0] == (8, 8)
    view = apply_phase(net, make_phase(4, 1, 10, S1_4.K1))
    assert view.token_grids()[0] == (2, 2)


def test_weights_untouched_across_phases():
    net = build_network(SEED_TOPOLOGY, ScaleSpec(width=16), input_res=32, num_classes=4)
    shapes = [p.shape for p in net.parameters()]
    before = [p.detach().clone() for p in net.parameters()]
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    for factor in (4, 2, 1):
        view = apply_phase(net, make_phase(factor, 1, 1, SEED_TOPOLOGY.K1))
        assert [p.shape for p in view.parameters()] == shapes
        assert count_params(view) == count_params(net)
        with torch.no_grad():
            assert torch.all(torch.isfinite(view.classify(x)))
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_full_phase_is_bit_identical():
    net = build_network(SEED_TOPOLOGY, ScaleSpec(width=16), input_res=32)
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    view = apply_phase(net, make_phase(1, 1, 5, SEED_TOPOLOGY.K1))
    with torch.no_grad():
        assert torch.equal(view(x), net(x))


def test_apply_phase_rejects_wrong_kernel_dilation():
    net = build_network(SEED_TOPOLOGY, ScaleSpec(width=16), input_res=32)
    with pytest.raises(ValueError):
        apply_phase(net, TokenPhase(16, 5, 1, 2))  # K1=8 needs dilation 6


def test_dilated_kernel_wider_than_image_still_tiles():
    # extent 43 on an 8px image: padding keeps one output window touching the image
    net = build_network(SEED_TOPOLOGY, ScaleSpec(width=16), input_res=32)
    view = apply_phase(net, make_phase(4, 1, 1, SEED_TOPOLOGY.K1))
    assert view.token_grids(8)[0] == (1, 1)


def test_schedule_serialization():
    sched = TokenSchedule.from_factors(PUBLISHED_SCHEDULES["long"], 8)
    rows = sched.as_list()
    assert [r["stride"] for r in rows] == [16, 8, 4]
    assert [r["dilation"] for r in rows] == [dilation_for_stride(s, 8) for s in (16, 8, 4)]
    assert np.sum([r["epoch_end"] - r["epoch_start"] + 1 for r in rows]) == 300
