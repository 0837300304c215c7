import numpy as np
import pytest
import torch
from PIL import Image
from sklearn.linear_model import LogisticRegression

from vitscale.complexity import Protocol
from vitscale.nn import build_network, count_flops
from vitscale.retokenize import TokenSchedule, flops_ratio
from vitscale.topology import SEED_TOPOLOGY, ScaleSpec, SearchSpace
from vitscale.training import (
    TrainConfig,
    correlation_study,
    make_dataset,
    train,
)

DESK = ScaleSpec((1, 1, 1, 1), 16)


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(seed=0, res=32, classes=4, n=256)


def _net(classes=4, seed=0):
    return build_network(SEED_TOPOLOGY, DESK, seed, 32, classes, dtype=torch.float32)


def test_dataset_is_balanced_and_deterministic():
    a = make_dataset(seed=3, res=32, classes=4, n=2048)
    b = make_dataset(seed=3, res=32, classes=4, n=2048)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [512] * 4
    assert np.bincount(a.labels[a.is_val]).tolist() == [128] * 4
    assert a.images.shape == (2048, 3, 32, 32)


def test_dataset_errors():
    with pytest.raises(ValueError):
        make_dataset(res=128)
    with pytest.raises(ValueError):
        make_dataset(kind="imagenet")
    with pytest.raises(ValueError):
        make_dataset(kind="ingest-directory")


def test_linear_probe_beats_chance():
    data = make_dataset(seed=1, res=16, classes=4, n=1024)
    (xt, yt), (xv, yv) = data.train, data.val
    probe = LogisticRegression(max_iter=500).fit(xt.reshape(len(xt), -1), yt)
    assert probe.score(xv.reshape(len(xv), -1), yv) > 0.25 + 0.1


def test_ingest_directory(tmp_path):
    rng = np.random.default_rng(0)
    for cls in ("cat", "dog"):
        (tmp_path / cls).mkdir()
        for i in range(4):
            pixels = rng.integers(0, 255, (20, 20, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(tmp_path / cls / f"{i}.png")
    data = make_dataset("ingest-directory", res=16, directory=tmp_path)
    assert data.classes == 2 and data.images.shape == (8, 3, 16, 16)
    assert abs(float(data.images.mean())) < 1e-5


def test_ingest_rejects_bad_layouts(tmp_path):
    with pytest.raises(ValueError):
        make_dataset("ingest-directory", directory=tmp_path / "missing")
    (tmp_path / "only").mkdir()
    with pytest.raises(ValueError):
        make_dataset("ingest-directory", directory=tmp_path)
    (tmp_path / "other").mkdir()
    (tmp_path / "only" / "x.png").write_bytes(b"not an image")
    (tmp_path / "other" / "y.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="decode"):
        make_dataset("ingest-directory", directory=tmp_path)


def test_zero_epochs_is_untrained_baseline(small_data):
    res = train(_net(), small_data, TrainConfig(epochs=0))
    assert res.train_loss == [] and 0.0 <= res.val_accuracy <= 0.6


def test_training_reduces_loss_and_is_deterministic():
    data = make_dataset(seed=0, res=32, classes=4, n=512)
    a = train(_net(), data, TrainConfig(epochs=3, batch_size=32))
    b = train(_net(), data, TrainConfig(epochs=3, batch_size=32))
    assert len(a.train_loss) == len(a.val_accuracies) == 3
    assert a.train_loss[2] <= a.train_loss[0]
    np.testing.assert_allclose(a.train_loss, b.train_loss, rtol=0, atol=1e-6)
    assert a.val_accuracy == b.val_accuracy and 0.0 <= a.val_accuracy <= 1.0


def test_scheduled_training_flops(small_data):
    sched = TokenSchedule.from_factors([(4, 1, 1), (2, 2, 2), (1, 3, 3)], SEED_TOPOLOGY.K1)
    net = _net()
    res = train(net, small_data, TrainConfig(epochs=3, schedule=sched))
    full = count_flops(net)
    assert res.flops_per_image[2] == full
    assert res.flops_per_image[0] / full == pytest.approx(flops_ratio(net, 4), rel=1e-12)
    assert res.flops_per_image[0] < res.flops_per_image[1] < full


def test_schedule_must_match_epochs(small_data):
    sched = TokenSchedule.from_factors([(4, 1, 1), (1, 2, 2)], SEED_TOPOLOGY.K1)
    with pytest.raises(ValueError):
        train(_net(), small_data, TrainConfig(epochs=3, schedule=sched))


def test_divergence_is_reported(small_data):
    net = _net()
    with torch.no_grad():
        net.head.weight.fill_(float("nan"))
    res = train(net, small_data, TrainConfig(epochs=2))
    assert res.diverged and np.isnan(res.val_accuracy)


def test_correlation_study_mechanics(small_data):
    space = SearchSpace({"E4": (2, 3, 4, 5, 6), "K1": (4, 8)})
    rows_seen = []
    res = correlation_study(space, 10, small_data, Protocol(samples=4, seeds=1, ntk_batch=2),
                            TrainConfig(epochs=1), seed=0, on_row=rows_seen.append)
    assert res.failures == 0 and len(res.rows) == 10
    assert set(res.tau) == {"kappa", "LE", "LE_kappa", "kappa_theta"}
    assert len(rows_seen) == len({r["spec_hash"] for r in res.rows}) == 10
    # resuming with every row already present evaluates nothing new
    done = {r["spec_hash"]: r for r in res.rows}
    again = correlation_study(space, 10, small_data, Protocol(samples=4, seeds=1, ntk_batch=2),
                              TrainConfig(epochs=1), seed=0, completed=done,
                              on_row=lambda r: pytest.fail("re-evaluated a finished row"))
    assert again.tau == res.tau


def test_correlation_study_minimum_size(small_data):
    with pytest.raises(ValueError):
        correlation_study(None, 1, small_data)
    with pytest.raises(ValueError, match="distinct"):
        correlation_study(SearchSpace({"K1": (4, 8)}), 10, small_data)


def test_accuracy_as_metric_gives_unit_tau():
    from vitscale.stats import kendall_tau

    acc = [0.31, 0.52, 0.47, 0.9, 0.66]
    assert kendall_tau(acc, acc) == 1.0
    assert kendall_tau([-a for a in acc], acc) == -1.0
