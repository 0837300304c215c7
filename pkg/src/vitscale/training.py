"""Desk-scale training, datasets and the metric/accuracy correlation study."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import rng as rng_streams
from .complexity import METRICS, Protocol
from .nn import build_network, count_flops, count_params
from .retokenize import TokenSchedule, apply_phase
from .scoring import ArchitectureScorer
from .stats import kendall_tau
from .topology import (
    SEED_TOPOLOGY,
    ScaleSpec,
    SearchSpace,
    TopologySpec,
    sample_uniform,
    space_size,
    spec_hash,
)

logger = logging.getLogger(__name__)

NOISE_STD = 1.2
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff"}


@dataclass
class ToyDataset:
    images: np.ndarray  # (n, 3, R, R) float32
    labels: np.ndarray  # (n,) int64
    is_val: np.ndarray  # (n,) bool
    classes: int

    @property
    def train(self):
        return self.images[~self.is_val], self.labels[~self.is_val]

    @property
    def val(self):
        return self.images[self.is_val], self.labels[self.is_val]


def _render_shapes(rng, label, classes, res):
    """Oriented grating whose angle encodes the class, plus a distractor blob and noise."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res - 0.5
    angle = math.pi * label / classes + rng.normal(0, 0.08)
    freq = rng.uniform(2.0, 5.0)
    # half-turn phase range keeps a weak linear signal in the class means
    phase = rng.uniform(0, math.pi)
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    cx, cy, r = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.08, 0.2)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r**2))
    colors = rng.uniform(0.3, 1.0, size=(3, 1, 1))
    img = colors * wave[None] + rng.uniform(-1, 1, size=(3, 1, 1)) * blob[None]
    img += rng.normal(0, NOISE_STD, size=img.shape)
    return img


def _load_directory(root: Path, res: int):
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"{root} needs at least two class sub-directories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class directory {d} holds no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((res, res), Image.BILINEAR)
                    images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            except (UnidentifiedImageError, OSError) as exc:
                raise ValueError(f"cannot decode {f}: {exc}") from None
            labels.append(label)
    x = np.stack(images)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    std = x.std(axis=(0, 2, 3), keepdims=True) + 1e-6
    return (x - mean) / std, np.asarray(labels, dtype=np.int64), len(class_dirs)


def make_dataset(kind="synthetic-shapes", seed=0, res=32, classes=4, n=4096,
                 val_fraction=0.25, directory=None) -> ToyDataset:
    """Deterministic toy classification data.

    ``synthetic-shapes`` renders ``n // classes`` images per class;
    ``ingest-directory`` reads ``directory/<class>/<image>`` files, resizes
    them to ``res`` and standardises channels.
    """
    rng = rng_streams.stream(seed, "data")
    if kind == "synthetic-shapes":
        if res > 64:
            raise ValueError("synthetic images are limited to 64 pixels at desk scale")
        per_class = n // classes
        labels = np.repeat(np.arange(classes), per_class)
        images = np.stack([_render_shapes(rng, k, classes, res) for k in labels])
        images = images.astype(np.float32)
    elif kind == "ingest-directory":
        if directory is None:
            raise ValueError("ingest-directory needs a directory")
        images, labels, classes = _load_directory(directory, res)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    is_val = np.zeros(len(labels), dtype=bool)
    for k in range(classes):
        idx = np.flatnonzero(labels == k)
        is_val[idx[: int(round(len(idx) * val_fraction))]] = True
    return ToyDataset(images, labels, is_val, classes)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: TokenSchedule | None = None
    seed: int = 0


@dataclass
class TrainResult:
    val_accuracy: float
    train_loss: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    flops_per_image: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    diverged: bool = False


def _view_for_epoch(net, schedule, epoch):
    if schedule is None:
        return net
    return apply_phase(net, schedule.phase_at(epoch))


def _accuracy(model, x, y, batch_size=256) -> float:
    if len(y) == 0:
        return float("nan")
    model.eval()
    dtype = next(model.parameters()).dtype
    correct = 0
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            xb = torch.as_tensor(x[i : i + batch_size], dtype=dtype)
            correct += int((model.classify(xb).argmax(-1).numpy() == y[i : i + batch_size]).sum())
    return correct / len(y)


def train(net, dataset: ToyDataset, config: TrainConfig | None = None) -> TrainResult:
    """AdamW with per-step cosine decay; deterministic for a fixed ``config.seed``."""
    config = config or TrainConfig()
    x_train, y_train = dataset.train
    x_val, y_val = dataset.val
    if config.schedule is not None and config.schedule.total_epochs != config.epochs:
        raise ValueError("token schedule must cover exactly the configured epochs")
    torch.manual_seed(config.seed)
    gen = rng_streams.stream(config.seed, "data", 1)
    steps_per_epoch = max(1, math.ceil(len(y_train) / config.batch_size))
    total_steps = max(1, config.epochs * steps_per_epoch)
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps))
    )
    dtype = next(net.parameters()).dtype
    result = TrainResult(val_accuracy=float("nan"))
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model = _view_for_epoch(net, config.schedule, epoch)
        stride = getattr(model, "stride", None)
        result.flops_per_image.append(count_flops(net, stride_override=stride))
        model.train()
        order = gen.permutation(len(y_train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            xb = torch.as_tensor(x_train[idx], dtype=dtype)
            yb = torch.as_tensor(y_train[idx])
            loss = F.cross_entropy(model.classify(xb), yb)
            if not torch.isfinite(loss):
                result.diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        if result.diverged:
            logger.warning("training diverged in epoch %d", epoch)
            break
        result.train_loss.append(float(np.mean(losses)))
        result.val_accuracies.append(_accuracy(model, x_val, y_val))
    result.val_accuracy = float("nan") if result.diverged else _accuracy(net, x_val, y_val)
    result.wall_time = time.perf_counter() - start
    return result


class VitClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn classifier around a freshly initialized windowed ViT.

    Parameters
    ----------
    topology : TopologySpec, default=None
        Architecture choices; ``None`` uses the seed topology.
    depths, width
        Stage depths and base width.
    epochs, batch_size, lr, weight_decay
        AdamW training with cosine decay.
    schedule : TokenSchedule, default=None
        Optional progressive re-tokenization over the epochs.
    random_state : int
        Seeds initialization and minibatch order.
    """

    def __init__(self, topology=None, depths=(1, 1, 1, 1), width=16, epochs=10, batch_size=64,
                 lr=1e-3, weight_decay=0.05, schedule=None, random_state=0):
        self.topology = topology
        self.depths = depths
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.random_state = random_state

    def _check_images(self, X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
            raise ValueError(f"expected square RGB images (n, 3, R, R), got {X.shape}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        X = self._check_images(X)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        topology = self.topology or SEED_TOPOLOGY
        self.network_ = build_network(
            topology, ScaleSpec(self.depths, self.width), self.random_state,
            X.shape[-1], len(self.classes_), dtype=torch.float32,
        )
        data = ToyDataset(X, y_enc.astype(np.int64), np.zeros(len(y_enc), dtype=bool),
                          len(self.classes_))
        config = TrainConfig(self.epochs, self.batch_size, self.lr, self.weight_decay,
                             self.schedule, self.random_state)
        self.train_result_ = train(self.network_, data, config)
        self.n_params_ = count_params(self.network_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = self._check_images(X)
        self.network_.eval()
        with torch.no_grad():
            logits = self.network_.classify(torch.as_tensor(X))
        return logits.softmax(-1).numpy()

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


@dataclass
class StudyResult:
    rows: list[dict]
    tau: dict[str, float]
    failures: int


MIN_STUDY_SIZE = 10
STUDY_COLUMNS = ("spec_hash", *METRICS, "val_acc", "params", "flops")


def correlation_study(space: SearchSpace | None, n_topologies: int, dataset: ToyDataset,
                      protocol: Protocol | None = None, config: TrainConfig | None = None,
                      scale: ScaleSpec | None = None, seed: int = 0,
                      completed: dict | None = None, on_row=None, map_fn=map) -> StudyResult:
    """Kendall tau between init-time metrics and trained accuracy over random topologies.

    ``completed`` maps spec hashes to rows from an earlier partial run; those
    topologies are not re-evaluated. ``on_row`` receives each new row as soon
    as it is available.
    """
    if n_topologies < MIN_STUDY_SIZE:
        raise ValueError(
            f"a correlation study needs at least {MIN_STUDY_SIZE} topologies, got {n_topologies}"
        )
    space = space or SearchSpace()
    scale = scale or ScaleSpec((1, 1, 1, 1), 16)
    protocol = protocol or Protocol(seeds=1)
    config = config or TrainConfig()
    if n_topologies > space_size(space):
        raise ValueError(f"space holds fewer than {n_topologies} distinct topologies")
    sampler = rng_streams.stream(seed, "policy", 7)
    specs = []
    while len(specs) < n_topologies:
        spec = sample_uniform(space, sampler)
        if spec not in specs:
            specs.append(spec)
    completed = dict(completed or {})
    todo = [s for s in specs if spec_hash(s, scale) not in completed]
    job = _StudyJob(dataset, protocol, config, scale, seed)
    failures = 0
    for spec, row in zip(todo, map_fn(job, todo)):
        if row is None:
            failures += 1
            continue
        completed[row["spec_hash"]] = row
        if on_row is not None:
            on_row(row)
    rows = [completed[h] for h in dict.fromkeys(spec_hash(s, scale) for s in specs)
            if h in completed]
    acc = [r["val_acc"] for r in rows]
    tau = {m: kendall_tau([r[m] for r in rows], acc) if len(rows) >= 2 else float("nan")
           for m in METRICS}
    return StudyResult(rows, tau, failures)


class _StudyJob:
    def __init__(self, dataset, protocol, config, scale, seed):
        self.dataset = dataset
        self.protocol = protocol
        self.config = config
        self.scale = scale
        self.seed = seed

    def __call__(self, spec: TopologySpec):
        res = self.dataset.images.shape[-1]
        try:
            scorer = ArchitectureScorer(res, random_state=self.seed)
            rep = scorer.report(spec, self.scale, protocol=self.protocol)
            net = build_network(spec, self.scale, self.seed, res, self.dataset.classes,
                                dtype=torch.float32)
            result = train(net, self.dataset, self.config)
            if result.diverged:
                raise FloatingPointError("training diverged")
        except Exception as exc:
            logger.warning("topology %s failed: %s", spec, exc)
            return None
        return {
            "spec_hash": spec_hash(spec, self.scale),
            "kappa": rep.kappa,
            "LE": rep.LE,
            "LE_kappa": rep.LE_kappa,
            "kappa_theta": rep.kappa_theta,
            "val_acc": result.val_accuracy,
            "params": count_params(net),
            "flops": count_flops(net),
        }
