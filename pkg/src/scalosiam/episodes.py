"""Class-disjoint splits, same/different pair sampling and the pairwise training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff.checkpoint import atomic_write

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple
    test_classes: tuple
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise ValueError(f"train and test classes overlap: {sorted(overlap)}")


def split_classes(manifest, n_train, seed):
    """Seeded shuffle of the class list; the first ``n_train`` classes train."""
    classes = list(manifest.classes)
    if not 1 <= n_train < len(classes):
        raise ValueError(f"n_train must be in [1, {len(classes) - 1}], got {n_train}")
    order = np.random.default_rng(seed).permutation(len(classes))
    chosen = set(order[:n_train].tolist())
    train = tuple(c for i, c in enumerate(classes) if i in chosen)
    test = tuple(c for i, c in enumerate(classes) if i not in chosen)
    return ClassSplit(train, test, seed)


@dataclass
class PairBatch:
    a: np.ndarray
    b: np.ndarray
    targets: np.ndarray
    keys_a: list
    keys_b: list
    same_fraction: float

    def __len__(self):
        return len(self.targets)


def _class_images(manifest, classes, images):
    pools = {}
    for c in classes:
        keys = [p for p in manifest.entries[c] if p in images]
        if not keys:
            raise KeyError(f"no cached images for class {c!r}")
        pools[c] = keys
    return pools


def sample_pairs(manifest, split, images, batch_size, same_fraction, rng):
    """Draw ``batch_size`` pairs from training classes only.

    Each pair is same-class with probability ``same_fraction``; a same-class
    pair never repeats an image. Targets are 1 exactly when labels agree.
    """
    pools = _class_images(manifest, split.train_classes, images)
    same_ok = [c for c in split.train_classes if len(pools[c]) >= 2]
    classes = list(split.train_classes)
    keys_a, keys_b, targets = [], [], []
    for _ in range(batch_size):
        same = rng.random() < same_fraction
        if same and not same_ok:
            raise ValueError("no training class has two images for a same-class pair")
        if not same and len(classes) < 2:
            raise ValueError("different-class pairs need at least two training classes")
        if same:
            c = same_ok[rng.integers(len(same_ok))]
            i, j = rng.choice(len(pools[c]), size=2, replace=False)
            ka, kb = pools[c][i], pools[c][j]
        else:
            ci, cj = rng.choice(len(classes), size=2, replace=False)
            pa, pb = pools[classes[ci]], pools[classes[cj]]
            ka, kb = pa[rng.integers(len(pa))], pb[rng.integers(len(pb))]
        keys_a.append(ka)
        keys_b.append(kb)
        targets.append(1.0 if manifest.label_of(ka) == manifest.label_of(kb) else 0.0)
    a = np.stack([images[k] for k in keys_a])
    b = np.stack([images[k] for k in keys_b])
    return PairBatch(a, b, np.asarray(targets), keys_a, keys_b, same_fraction)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    epochs: int = 50
    batches_per_epoch: int = 100
    batch_size: int = 32
    dropout_rate: float = 0.2
    seed: int = 0
    representation: str = "scalogram"
    same_fraction: float = 0.5

    def __post_init__(self):
        for name in ("epochs", "batches_per_epoch", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class LossCurve:
    epochs: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    pair_accuracy: list = field(default_factory=list)

    def append(self, epoch, loss, acc):
        self.epochs.append(epoch)
        self.mean_loss.append(loss)
        self.pair_accuracy.append(acc)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "pair_accuracy"])
        for row in zip(self.epochs, self.mean_loss, self.pair_accuracy):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: object
    curve: LossCurve
    best_epoch: int
    best_loss: float


def train(model, manifest, split, images, config, run_dir=None, restore_best=True):
    """Pairwise BCE training with one Adam step per batch.

    The epoch with the lowest mean training loss is kept as the checkpoint;
    with ``restore_best`` the returned model carries those parameters.
    """
    probe = next(iter(images.values()))
    if tuple(np.shape(probe)) != model.input_shape:
        raise ValueError(f"cached images {np.shape(probe)} do not match model input {model.input_shape}")
    model.embedding.config = _with_dropout(model.embedding.config, config.dropout_rate)
    model.config = model.embedding.config
    pair_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    state = ad.AdamState(lr=config.lr)
    params = model.parameters()
    curve = LossCurve()
    best = (math.inf, 0, None)
    dtype = model.merge_weights.dtype
    for epoch in range(1, config.epochs + 1):
        losses, correct, seen = [], 0, 0
        for b in range(config.batches_per_epoch):
            batch = sample_pairs(manifest, split, images, config.batch_size, config.same_fraction, pair_rng)
            test = set(split.test_classes)
            if any(manifest.label_of(k) in test for k in batch.keys_a + batch.keys_b):
                raise TrainingError("test-class image leaked into a training batch")
            prob = model.pair_forward(
                ad.Tensor(batch.a.astype(dtype, copy=False)),
                ad.Tensor(batch.b.astype(dtype, copy=False)),
                training=True,
                rng=drop_rng,
            )
            loss = ad.bce_loss(prob, batch.targets.reshape(-1, 1))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.zero_grad()
            loss.backward()
            ad.adam_step(params, state)
            losses.append(value)
            correct += int(((prob.data[:, 0] >= 0.5) == (batch.targets == 1)).sum())
            seen += len(batch)
        mean_loss = math.fsum(losses) / len(losses)
        acc = correct / seen
        curve.append(epoch, mean_loss, acc)
        log.info("epoch %d loss %.5f pair-acc %.4f", epoch, mean_loss, acc)
        if mean_loss < best[0]:
            best = (mean_loss, epoch, {k: v.copy() for k, v in model.state_dict().items()})
    if run_dir is not None:
        from .siamese import save_model

        run_dir = Path(run_dir)
        current = {k: v.copy() for k, v in model.state_dict().items()}
        model.load_state_dict(best[2])
        save_model(model, run_dir / "ckpt")
        model.load_state_dict(current)
        atomic_write(run_dir / "loss.csv", curve.to_csv(), mode="w")
    if restore_best:
        model.load_state_dict(best[2])
    return TrainResult(model, curve, best[1], best[0])


def _with_dropout(cfg, rate):
    if rate is None or cfg.dropout_rate == rate:
        return cfg
    from dataclasses import replace

    return replace(cfg, dropout_rate=rate)
