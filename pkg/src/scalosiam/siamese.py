"""Convolutional and residual Siamese verification networks.

Both twins run the same embedding network object, so weight sharing is
structural. The merge head scores a pair as
``sigmoid(sum_j gamma_j * |e1_j - e2_j| + bias)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHT_STD = 0.01


_DESK_RECIPE = dict(init="he", dropout_rate=0.0, embedding_activation="relu")


def _normal(rng, shape, std, dtype):
    out = rng.standard_normal(size=shape, dtype=np.float32 if dtype == np.float32 else np.float64)
    out *= std
    return out.astype(dtype, copy=False)


def _init_std(init, fan_in):
    if init == "normal":
        return WEIGHT_STD
    if init == "he":
        return float(np.sqrt(2.0 / fan_in))
    raise ValueError(f"unknown init scheme {init!r}")


def _conv_params(prefix, k, c_in, c_out, rng, dtype, init="normal"):
    std = _init_std(init, k * k * c_in)
    return {
        f"{prefix}.kernel": Tensor(_normal(rng, (k, k, c_in, c_out), std, dtype), True, f"{prefix}.kernel"),
        f"{prefix}.bias": Tensor(np.zeros(c_out, dtype=dtype), True, f"{prefix}.bias"),
    }


def _dense_params(prefix, n_in, n_out, rng, dtype, init="normal"):
    std = _init_std(init, n_in)
    return {
        f"{prefix}.weight": Tensor(_normal(rng, (n_in, n_out), std, dtype), True, f"{prefix}.weight"),
        f"{prefix}.bias": Tensor(np.zeros(n_out, dtype=dtype), True, f"{prefix}.bias"),
    }


# --------------------------------------------------------------------- configs

@dataclass(frozen=True)
class ConvSiameseConfig:
    input_shape: tuple = (224, 224, 3)
    conv_blocks: tuple = ((10, 64), (7, 128), (4, 128), (4, 256))
    pool_after: tuple = (True, True, True, False)
    embedding_dim: int = 4096
    dropout_rate: float = 0.2
    embedding_activation: str = "sigmoid"
    init: str = "normal"

    @classmethod
    def desk(cls, **overrides):
        """64x64 configuration small enough to train on one CPU core.

        Also switches the training recipe: He init, no dropout and relu
        embeddings, which keep the small model out of the saturated plateau.
        """
        kw = dict(
            input_shape=(64, 64, 3),
            conv_blocks=((10, 16), (7, 16), (4, 16)),
            pool_after=(True, True, False),
            embedding_dim=256,
            **_DESK_RECIPE,
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        if len(self.conv_blocks) != len(self.pool_after):
            raise ValueError("conv_blocks and pool_after differ in length")
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        kernels = [k for k, _ in self.conv_blocks]
        for prev, nxt in zip(kernels, kernels[1:]):
            if prev - nxt not in (0, 3):
                raise ValueError(f"kernel sizes must shrink in steps of 3, got {kernels}")
        for _, ch in self.conv_blocks:
            if ch % 16:
                raise ValueError(f"channel count {ch} is not a multiple of 16")
        if self.embedding_activation not in ("sigmoid", "relu"):
            raise ValueError(f"unknown embedding activation {self.embedding_activation!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.feature_shape()

    def feature_shape(self):
        """Spatial output ``(h, w, c)`` of the last conv block."""
        h, w, c = self.input_shape
        for (k, ch), pool in zip(self.conv_blocks, self.pool_after):
            h, w, c = h - k + 1, w - k + 1, ch
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_shape} too small for kernel {k}")
            if pool:
                if h < 2 or w < 2:
                    raise ValueError("feature map too small to pool")
                h, w = h // 2, w // 2
        return h, w, c


@dataclass(frozen=True)
class ResidualSiameseConfig:
    input_shape: tuple = (224, 224, 3)
    stem: tuple = (7, 64)
    stages: tuple = (("conv", 64, 1), ("identity", 64, 2), ("conv", 144, 1), ("identity", 144, 2))
    block_kernel: int = 3
    embedding_dim: int = 4096
    dropout_rate: float = 0.2
    embedding_activation: str = "sigmoid"
    init: str = "normal"
    target_param_budget: tuple = (20e6, 30e6)

    @classmethod
    def desk(cls, **overrides):
        kw = dict(
            input_shape=(64, 64, 3),
            stem=(7, 16),
            stages=(("conv", 16, 1), ("identity", 16, 1)),
            embedding_dim=64,
            target_param_budget=None,
            **_DESK_RECIPE,
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        if self.block_kernel % 2 != 1:
            raise ValueError("block_kernel must be odd so residual branches keep their size")
        channels = self.stem[1]
        for kind, ch, count in self.stages:
            if kind not in ("identity", "conv"):
                raise ValueError(f"unknown block type {kind!r}")
            if count < 1:
                raise ValueError("stage block count must be positive")
            if kind == "identity" and ch != channels:
                raise ValueError(f"identity block cannot change channels {channels} -> {ch}")
            channels = ch
        self.feature_shape()
        if self.target_param_budget is not None:
            lo, hi = self.target_param_budget
            n = residual_param_count(self)
            if not lo <= n <= hi:
                raise ValueError(f"parameter count {n:,} outside budget [{lo:,.0f}, {hi:,.0f}]")

    def feature_shape(self):
        # stem conv is valid and followed by a pool; every stage ends in a pool
        h, w, _ = self.input_shape
        k, c = self.stem
        h, w = (h - k + 1) // 2, (w - k + 1) // 2
        for _, ch, _ in self.stages:
            h, w, c = h // 2, w // 2, ch
        if h < 1 or w < 1:
            raise ValueError(f"input {self.input_shape} too small for {len(self.stages)} stages")
        return h, w, c


def conv_param_count(config):
    """Closed-form parameter count of a conv-Siamese config."""
    total, c_in = 0, config.input_shape[2]
    for k, ch in config.conv_blocks:
        total += k * k * c_in * ch + ch
        c_in = ch
    h, w, c = config.feature_shape()
    total += h * w * c * config.embedding_dim + config.embedding_dim
    return total + config.embedding_dim + 1


def residual_param_count(config):
    kb = config.block_kernel
    k, c = config.stem
    total = k * k * config.input_shape[2] * c + c
    for kind, ch, count in config.stages:
        for _ in range(count):
            total += kb * kb * c * ch + ch + kb * kb * ch * ch + ch
            if kind == "conv":
                total += c * ch + ch
            c = ch
    h, w, c = config.feature_shape()
    total += h * w * c * config.embedding_dim + config.embedding_dim
    return total + config.embedding_dim + 1


# ------------------------------------------------------------ embedding nets

class ConvEmbedding:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    def forward(self, x, training=False, rng=None):
        cfg, p = self.config, self.params
        for i, pool in enumerate(cfg.pool_after):
            x = ad.conv2d(x, p[f"conv{i}.kernel"], p[f"conv{i}.bias"])
            x = ad.relu(x)
            if pool:
                x = ad.maxpool2(x)
            x = ad.dropout(x, cfg.dropout_rate, training, rng)
        x = ad.flatten(x)
        x = ad.dense(x, p["embed.weight"], p["embed.bias"])
        return ad.activation(x, cfg.embedding_activation)


def conv_block_names(config):
    return [f"conv{i}" for i in range(len(config.conv_blocks))]


class ResidualEmbedding:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    def block(self, x, prefix, kind):
        """``F(x) + skip(x)`` with ``F = conv-relu-conv`` (same padding)."""
        p, pad = self.params, self.config.block_kernel // 2
        f = ad.conv2d(x, p[f"{prefix}.a.kernel"], p[f"{prefix}.a.bias"], padding=pad)
        f = ad.relu(f)
        f = ad.conv2d(f, p[f"{prefix}.b.kernel"], p[f"{prefix}.b.bias"], padding=pad)
        skip = x if kind == "identity" else ad.conv2d(x, p[f"{prefix}.proj.kernel"], p[f"{prefix}.proj.bias"])
        return ad.add(f, skip)

    def forward(self, x, training=False, rng=None):
        cfg, p = self.config, self.params
        x = ad.relu(ad.conv2d(x, p["stem.kernel"], p["stem.bias"]))
        x = ad.maxpool2(x)
        for s, (kind, _, count) in enumerate(cfg.stages):
            for b in range(count):
                x = self.block(x, f"stage{s}.{b}", kind)
            x = ad.maxpool2(ad.relu(x))
            x = ad.dropout(x, cfg.dropout_rate, training, rng)
        x = ad.flatten(x)
        x = ad.dense(x, p["embed.weight"], p["embed.bias"])
        return ad.activation(x, cfg.embedding_activation)


# ------------------------------------------------------------------- models

@dataclass
class PairPrediction:
    p: float
    feature_l1: np.ndarray


@dataclass
class SiameseModel:
    architecture: str
    config: object
    embedding: object
    merge_weights: Tensor
    merge_bias: Tensor
    params: dict = field(default_factory=dict)

    @property
    def embedding_dim(self):
        return self.merge_weights.shape[0]

    @property
    def input_shape(self):
        return tuple(self.config.input_shape)

    def parameters(self):
        return self.params

    def config_dict(self):
        return {"architecture": self.architecture, "config": _jsonable(asdict(self.config))}

    def config_digest(self):
        blob = json.dumps(self.config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def parameter_digest(self):
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # twin branches: both call the same embedding object
    def twin_1(self, x, training=False, rng=None):
        return self.embedding.forward(x, training, rng)

    twin_2 = twin_1

    def _as_input(self, image):
        x = image.pixels if hasattr(image, "pixels") else image
        x = np.asarray(x)
        expected = self.input_shape
        if x.shape[-3:] != expected:
            raise ValueError(f"image shape {x.shape} does not match model input {expected}")
        return Tensor(x.astype(self.merge_weights.dtype, copy=False))

    def embed(self, image, training=False, rng=None):
        return self.twin_1(self._as_input(image), training, rng)

    def merge_logit(self, e1, e2):
        d = ad.absolute(ad.sub(e1, e2))
        return ad.dense(d, self.merge_weights, self.merge_bias), d

    def merge(self, e1, e2):
        logit, d = self.merge_logit(e1, e2)
        return ad.sigmoid(logit), d

    def pair_forward(self, a, b, training=False, rng=None):
        """Batched pair probabilities ``[B, 1]``; both halves share one embedding pass."""
        n = a.shape[0]
        both = self.embedding.forward(ad.concat([a, b]), training, rng)
        prob, _ = self.merge(ad.take(both, 0, n), ad.take(both, n, 2 * n))
        return prob

    def predict_pair(self, a, b):
        e1 = self.twin_1(self._as_input(a))
        e2 = self.twin_2(self._as_input(b))
        prob, d = self.merge(e1, e2)
        return PairPrediction(p=float(prob.data.reshape(-1)[0]), feature_l1=d.data)

    def pair_logit(self, a, b):
        e1 = self.twin_1(self._as_input(a))
        e2 = self.twin_2(self._as_input(b))
        logit, _ = self.merge_logit(e1, e2)
        return float(logit.data.reshape(-1)[0])

    def embed_many(self, images, chunk=64):
        """Inference embeddings for a stack of images, one row per image."""
        images = np.asarray(images, dtype=self.merge_weights.dtype)
        rows = []
        for i in range(0, len(images), chunk):
            rows.append(self.embedding.forward(Tensor(images[i:i + chunk])).data)
        return np.concatenate(rows, axis=0)

    def merge_probabilities(self, query, support):
        """``P_k`` for one query embedding against rows of ``support`` embeddings."""
        d = np.abs(support - query[None, :])
        logits = d @ self.merge_weights.data[:, 0] + self.merge_bias.data[0]
        return ad.ops._stable_sigmoid(np.asarray(logits, dtype=np.float64))

    def state_dict(self):
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.asarray(state[name], dtype=t.dtype).copy()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _merge_head(embedding_dim, rng, dtype, init="normal"):
    std = 0.2 / np.sqrt(embedding_dim) if init == "normal" else _init_std(init, embedding_dim)
    gamma = _normal(rng, (embedding_dim, 1), std, dtype)
    return (
        Tensor(gamma, True, "merge.weight"),
        Tensor(np.zeros(1, dtype=dtype), True, "merge.bias"),
    )


def build_conv_siamese(config=None, rng=None, dtype=np.float32):
    """Build ``conv -> relu -> [pool] -> dropout`` blocks, a dense embedding and the merge head."""
    config = config or ConvSiameseConfig()
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    params, c_in = {}, config.input_shape[2]
    for i, (k, ch) in enumerate(config.conv_blocks):
        params.update(_conv_params(f"conv{i}", k, c_in, ch, rng, dtype, config.init))
        c_in = ch
    h, w, c = config.feature_shape()
    params.update(_dense_params("embed", h * w * c, config.embedding_dim, rng, dtype, config.init))
    gamma, bias = _merge_head(config.embedding_dim, rng, dtype, config.init)
    params["merge.weight"], params["merge.bias"] = gamma, bias
    return SiameseModel("conv", config, ConvEmbedding(config, params), gamma, bias, params)


def build_residual_siamese(config=None, rng=None, dtype=np.float32):
    config = config or ResidualSiameseConfig()
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    kb = config.block_kernel
    k, c = config.stem
    params = _conv_params("stem", k, config.input_shape[2], c, rng, dtype, config.init)
    for s, (kind, ch, count) in enumerate(config.stages):
        for b in range(count):
            prefix = f"stage{s}.{b}"
            params.update(_conv_params(f"{prefix}.a", kb, c, ch, rng, dtype, config.init))
            params.update(_conv_params(f"{prefix}.b", kb, ch, ch, rng, dtype, config.init))
            if kind == "conv":
                params.update(_conv_params(f"{prefix}.proj", 1, c, ch, rng, dtype, config.init))
            c = ch
    h, w, c = config.feature_shape()
    params.update(_dense_params("embed", h * w * c, config.embedding_dim, rng, dtype, config.init))
    gamma, bias = _merge_head(config.embedding_dim, rng, dtype, config.init)
    params["merge.weight"], params["merge.bias"] = gamma, bias
    return SiameseModel("residual", config, ResidualEmbedding(config, params), gamma, bias, params)


def build_model(architecture, config=None, rng=None, dtype=np.float32):
    if architecture == "conv":
        return build_conv_siamese(config, rng, dtype)
    if architecture == "residual":
        return build_residual_siamese(config, rng, dtype)
    raise ValueError(f"unknown architecture {architecture!r}")


def param_count(model):
    return int(sum(t.size for t in model.params.values()))


def architecture_table(model):
    """Rows of ``(name, shape, count)`` for every parameter tensor."""
    return [(name, tuple(t.shape), int(t.size)) for name, t in model.params.items()]


def config_from_dict(d):
    arch, cfg = d["architecture"], dict(d["config"])
    for key in ("input_shape", "stem", "pool_after", "target_param_budget"):
        if cfg.get(key) is not None and key in cfg:
            cfg[key] = tuple(cfg[key])
    if "conv_blocks" in cfg:
        cfg["conv_blocks"] = tuple(tuple(b) for b in cfg["conv_blocks"])
    if "stages" in cfg:
        cfg["stages"] = tuple(tuple(s) for s in cfg["stages"])
    cls = ConvSiameseConfig if arch == "conv" else ResidualSiameseConfig
    return arch, cls(**cfg)


def save_model(model, path):
    """Write the OSTB checkpoint plus a ``.json`` config sidecar."""
    from .autodiff.checkpoint import atomic_write, save

    save(path, model.state_dict())
    sidecar = json.dumps(model.config_dict(), indent=2, sort_keys=True)
    atomic_write(str(path) + ".json", sidecar, mode="w")


def load_model(path):
    from .autodiff.checkpoint import load

    with open(str(path) + ".json") as fh:
        arch, config = config_from_dict(json.load(fh))
    model = build_model(arch, config, np.random.default_rng(0))
    model.load_state_dict(load(path))
    return model
