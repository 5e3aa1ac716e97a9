"""Class splits, pair sampling and the training loop."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import desk_model
from scalosiam.audio import DatasetManifest
from scalosiam.episodes import (
    ClassSplit,
    TrainConfig,
    TrainingError,
    sample_pairs,
    split_classes,
    train,
)
from scalosiam.siamese import ConvSiameseConfig, build_model, load_model


def toy_manifest(n_classes=4, per_class=3):
    classes = [f"c{i}" for i in range(n_classes)]
    entries = {c: [f"{c}/{j}.wav" for j in range(per_class)] for c in classes}
    return DatasetManifest(classes, entries, per_class)


def toy_images(manifest, size=64, seed=0):
    """Class-dependent stripes plus noise so pairs are learnable."""
    rng = np.random.default_rng(seed)
    images = {}
    for ci, c in enumerate(manifest.classes):
        for p in manifest.entries[c]:
            img = rng.random((size, size)) * 0.2
            img[:, (ci * 8) % size: (ci * 8) % size + 6] += 0.8
            images[p] = np.repeat(img[..., None], 3, axis=2).astype(np.float32)
    return images


class TestSplit:
    @settings(max_examples=50, deadline=None)
    @given(n_classes=st.integers(2, 14), seed=st.integers(0, 10 ** 6), data=st.data())
    def test_partition(self, n_classes, seed, data):
        m = toy_manifest(n_classes, 2)
        n_train = data.draw(st.integers(1, n_classes - 1))
        s = split_classes(m, n_train, seed)
        assert len(s.train_classes) == n_train
        assert set(s.train_classes) | set(s.test_classes) == set(m.classes)
        assert not set(s.train_classes) & set(s.test_classes)
        assert s == split_classes(m, n_train, seed)

    def test_twelve_two(self):
        s = split_classes(toy_manifest(14, 2), 12, 3)
        assert (len(s.train_classes), len(s.test_classes)) == (12, 2)

    @pytest.mark.parametrize("n_train", [0, 4, 5])
    def test_out_of_range(self, n_train):
        with pytest.raises(ValueError):
            split_classes(toy_manifest(4), n_train, 0)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ClassSplit(("a", "b"), ("b",))


class TestPairs:
    def setup_method(self):
        self.m = toy_manifest(5, 4)
        self.images = {p: np.zeros((4, 4, 3)) for p in self.m.all_paths()}
        self.split = split_classes(self.m, 3, 0)

    def test_label_rule_and_train_only(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = sample_pairs(self.m, self.split, self.images, 16, 0.5, rng)
            for ka, kb, t in zip(batch.keys_a, batch.keys_b, batch.targets):
                assert t == float(self.m.label_of(ka) == self.m.label_of(kb))
                assert self.m.label_of(ka) in self.split.train_classes
                assert self.m.label_of(kb) in self.split.train_classes
                if t == 1:
                    assert ka != kb

    @pytest.mark.parametrize("fraction", [0.0, 1.0])
    def test_fraction_bounds(self, fraction):
        batch = sample_pairs(self.m, self.split, self.images, 32, fraction, np.random.default_rng(1))
        assert np.all(batch.targets == fraction)

    def test_fraction_on_average(self):
        rng = np.random.default_rng(2)
        t = np.concatenate([sample_pairs(self.m, self.split, self.images, 100, 0.3, rng).targets for _ in range(20)])
        assert abs(t.mean() - 0.3) < 0.05

    def test_seeded(self):
        a = sample_pairs(self.m, self.split, self.images, 8, 0.5, np.random.default_rng(9))
        b = sample_pairs(self.m, self.split, self.images, 8, 0.5, np.random.default_rng(9))
        assert a.keys_a == b.keys_a and a.keys_b == b.keys_b


class TestTrain:
    def setup_method(self):
        self.m = toy_manifest(4, 4)
        self.images = toy_images(self.m)
        self.split = split_classes(self.m, 3, 0)

    def _model(self, seed=0):
        return desk_model("conv", seed, dtype=np.float32)

    def test_lr_zero_leaves_parameters(self):
        model = self._model()
        before = model.parameter_digest()
        cfg = TrainConfig(lr=0.0, epochs=2, batches_per_epoch=2, batch_size=4)
        train(model, self.m, self.split, self.images, cfg)
        assert model.parameter_digest() == before

    def test_loss_decreases(self):
        model = self._model()
        cfg = TrainConfig(epochs=6, batches_per_epoch=4, batch_size=8, dropout_rate=0.0)
        result = train(model, self.m, self.split, self.images, cfg, restore_best=False)
        losses = result.curve.mean_loss
        assert all(np.isfinite(losses))
        assert min(losses[-2:]) < losses[0]

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, batches_per_epoch=2, batch_size=4, seed=5)
        r1 = train(self._model(), self.m, self.split, self.images, cfg)
        r2 = train(self._model(), self.m, self.split, self.images, cfg)
        assert r1.curve.mean_loss == r2.curve.mean_loss
        assert r1.model.parameter_digest() == r2.model.parameter_digest()

    def test_checkpoint_and_loss_csv(self, tmp_path):
        cfg = TrainConfig(epochs=3, batches_per_epoch=2, batch_size=4)
        result = train(self._model(), self.m, self.split, self.images, cfg, run_dir=tmp_path)
        back = load_model(tmp_path / "ckpt")
        assert back.parameter_digest() == result.model.parameter_digest()
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,pair_accuracy"
        assert len(lines) == 4

    def test_image_shape_mismatch(self):
        model = build_model("conv", ConvSiameseConfig.desk(input_shape=(72, 72, 3)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            train(model, self.m, self.split, self.images, TrainConfig(epochs=1, batches_per_epoch=1, batch_size=2))

    def test_non_finite_loss_raises(self):
        images = {k: np.full_like(v, np.nan) for k, v in self.images.items()}
        with pytest.raises(TrainingError):
            train(self._model(), self.m, self.split, images, TrainConfig(epochs=1, batches_per_epoch=1, batch_size=2))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
