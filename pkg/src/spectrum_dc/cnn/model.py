"""Residual CNN for single-channel spectrogram tiles.

Two layouts are available:

* ``reduced``: 3x3 stem (1->16), two stages of two basic blocks
  (16->32 and 32->64, both stride 2), global average pool, 64 features.
* ``resnet18``: the standard ResNet18 trunk with a 1-channel 7x7 stem and
  max-pool, 512 features.

Both end in a linear ``F -> K`` classification head whose input is the
pooled feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, LabelRangeError, ShapeError
from . import layers as L

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Architecture:
    name: str
    window: int
    k: int
    stem_channels: int
    stem_kernel: int
    stem_stride: int
    stem_pool: bool
    stage_channels: tuple
    stage_strides: tuple
    blocks_per_stage: int
    in_channels: int = 1

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def downsampling(self) -> int:
        f = self.stem_stride * (2 if self.stem_pool else 1)
        for s in self.stage_strides:
            f *= s
        return f

    def describe(self) -> str:
        """Canonical one-line text form, stable across runs."""
        items = [
            ("arch", self.name),
            ("window", self.window),
            ("k", self.k),
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("stem_kernel", self.stem_kernel),
            ("stem_stride", self.stem_stride),
            ("stem_pool", int(self.stem_pool)),
            ("stage_channels", ",".join(map(str, self.stage_channels))),
            ("stage_strides", ",".join(map(str, self.stage_strides))),
            ("blocks_per_stage", self.blocks_per_stage),
        ]
        return ";".join(f"{k}={v}" for k, v in items)

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        try:
            kv = dict(item.split("=", 1) for item in text.split(";"))
            ints = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
            return cls(
                name=kv["arch"],
                window=int(kv["window"]),
                k=int(kv["k"]),
                in_channels=int(kv["in_channels"]),
                stem_channels=int(kv["stem_channels"]),
                stem_kernel=int(kv["stem_kernel"]),
                stem_stride=int(kv["stem_stride"]),
                stem_pool=bool(int(kv["stem_pool"])),
                stage_channels=ints(kv["stage_channels"]),
                stage_strides=ints(kv["stage_strides"]),
                blocks_per_stage=int(kv["blocks_per_stage"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad architecture descriptor {text!r}: {exc}") from None

    def layer_descriptors(self) -> list:
        """Flat list of layer descriptors, in execution order."""
        out = [
            {"type": "conv2d", "name": "stem.conv", "out_channels": self.stem_channels,
             "kernel": self.stem_kernel, "stride": self.stem_stride, "pad": self.stem_kernel // 2},
            {"type": "batchnorm", "name": "stem.bn"},
            {"type": "relu"},
        ]
        if self.stem_pool:
            out.append({"type": "maxpool", "kernel": 3, "stride": 2, "pad": 1})
        for s, b, cin, cout, stride in self._blocks():
            p = f"stage{s}.{b}"
            block = {"type": "residual_block", "name": p, "layers": [
                {"type": "conv2d", "name": f"{p}.conv1", "out_channels": cout, "kernel": 3,
                 "stride": stride, "pad": 1},
                {"type": "batchnorm", "name": f"{p}.bn1"},
                {"type": "relu"},
                {"type": "conv2d", "name": f"{p}.conv2", "out_channels": cout, "kernel": 3,
                 "stride": 1, "pad": 1},
                {"type": "batchnorm", "name": f"{p}.bn2"},
            ]}
            if stride != 1 or cin != cout:
                block["shortcut"] = [
                    {"type": "conv2d", "name": f"{p}.down.conv", "out_channels": cout,
                     "kernel": 1, "stride": stride, "pad": 0},
                    {"type": "batchnorm", "name": f"{p}.down.bn"},
                ]
            out.append(block)
            out.append({"type": "relu"})
        out.append({"type": "global_avg_pool"})
        out.append({"type": "linear", "name": "head", "in": self.feature_dim, "out": self.k})
        return out

    def _blocks(self):
        cin = self.stem_channels
        for s, (cout, stride) in enumerate(zip(self.stage_channels, self.stage_strides), start=1):
            for b in range(self.blocks_per_stage):
                yield s, b, cin, cout, stride if b == 0 else 1
                cin = cout

    def spatial_sizes(self) -> list:
        """Spatial side length after the stem and after each stage."""
        size = L.conv_out_size(self.window, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        if self.stem_pool:
            size = L.conv_out_size(size, 3, 2, 1)
        sizes = [size]
        for stride in self.stage_strides:
            size = L.conv_out_size(size, 3, stride, 1)
            sizes.append(size)
        return sizes


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    balanced_sampling: bool = True
    seed: int = 0

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class CnnModel:
    arch: Architecture
    params: dict
    buffers: dict
    seed_used: int
    dtype: type = np.float32
    velocity: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.arch.feature_dim

    @property
    def k(self) -> int:
        return self.arch.k

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def trunk_names(self) -> list:
        return [n for n in self.params if not n.startswith("head.")]


def make_architecture(arch="reduced", window=32, feature_dim=None, k=10, widths=None,
                      blocks_per_stage=None) -> Architecture:
    if arch == "reduced":
        stem, s1, s2 = widths if widths is not None else (16, 32, feature_dim or 64)
        a = Architecture("reduced", window, k, stem, 3, 1, False, (s1, s2), (2, 2),
                         blocks_per_stage or 2)
    elif arch == "resnet18":
        if widths is not None:
            raise ConfigError("resnet18 has fixed widths")
        a = Architecture("resnet18", window, k, 64, 7, 2, True, (64, 128, 256, 512), (1, 2, 2, 2),
                         blocks_per_stage or 2)
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    if feature_dim is not None and feature_dim != a.feature_dim:
        raise ConfigError(f"{arch} produces {a.feature_dim} features, not {feature_dim}")
    if window < 8 or window % a.downsampling:
        raise ConfigError(f"window must be >= 8 and divisible by {a.downsampling}, got {window}")
    if k < 2:
        raise ConfigError(f"K must be >= 2, got {k}")
    return a


def _param_shapes(arch: Architecture):
    shapes = {}

    def conv_bn(name, cin, cout, kernel, bn):
        shapes[f"{name}.weight"] = ("conv", (cout, cin, kernel, kernel))
        shapes[f"{bn}.gamma"] = ("ones", (cout,))
        shapes[f"{bn}.beta"] = ("zeros", (cout,))

    conv_bn("stem.conv", arch.in_channels, arch.stem_channels, arch.stem_kernel, "stem.bn")
    for s, b, cin, cout, stride in arch._blocks():
        p = f"stage{s}.{b}"
        conv_bn(f"{p}.conv1", cin, cout, 3, f"{p}.bn1")
        conv_bn(f"{p}.conv2", cout, cout, 3, f"{p}.bn2")
        if stride != 1 or cin != cout:
            conv_bn(f"{p}.down.conv", cin, cout, 1, f"{p}.down.bn")
    return shapes


def _bn_names(arch: Architecture):
    return [n[: -len(".gamma")] for n in _param_shapes(arch) if n.endswith(".gamma")]


def _head_init(rng, f, k, dtype):
    bound = 1.0 / np.sqrt(f)
    w = rng.uniform(-bound, bound, size=(k, f)).astype(dtype)
    b = rng.uniform(-bound, bound, size=k).astype(dtype)
    return w, b


def build_model(arch="reduced", window=32, feature_dim=None, k=10, seed=0, widths=None,
                blocks_per_stage=None, dtype=np.float32) -> CnnModel:
    """Build a freshly initialized model.

    Conv weights are He-normal (std ``sqrt(2 / fan_in)``), batchnorm starts
    as the identity, and the head uses uniform ``+-1/sqrt(F)``. Everything
    is drawn from one generator seeded with ``seed``.
    """
    a = arch if isinstance(arch, Architecture) else make_architecture(
        arch, window, feature_dim, k, widths, blocks_per_stage)
    return _init_model(a, seed, dtype)


def _init_model(a: Architecture, seed, dtype) -> CnnModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, (kind, shape) in _param_shapes(a).items():
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif kind == "ones":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    params["head.weight"], params["head.bias"] = _head_init(rng, a.feature_dim, a.k, dtype)
    buffers = {}
    for bn in _bn_names(a):
        c = params[f"{bn}.gamma"].shape[0]
        buffers[f"{bn}.running_mean"] = np.zeros(c, dtype=dtype)
        buffers[f"{bn}.running_var"] = np.ones(c, dtype=dtype)
    return CnnModel(a, params, buffers, seed, dtype)


def reinit_head(m: CnnModel, k: int, seed: int) -> None:
    """Replace the classification head with a fresh ``F -> k`` layer."""
    if k < 2:
        raise ConfigError(f"K must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    m.params["head.weight"], m.params["head.bias"] = _head_init(rng, m.feature_dim, k, m.dtype)
    m.velocity.pop("head.weight", None)
    m.velocity.pop("head.bias", None)
    m.arch = replace(m.arch, k=k)


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(m: CnnModel, batch) -> np.ndarray:
    x = getattr(batch, "pixels", batch)
    x = np.asarray(x)
    W = m.arch.window
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (W, W):
        raise ShapeError(f"expected tiles of shape (n, {W}, {W}), got {np.shape(batch)}")
    if x.shape[0] == 0:
        raise ShapeError("batch is empty")
    return x[..., None].astype(m.dtype, copy=False)


class _Pass:
    """State of one forward pass, kept for the backward pass."""

    def __init__(self, m, train, update_stats):
        self.m = m
        self.train = train
        self.update_stats = update_stats
        self.caches = []

    def conv_bn(self, x, conv, bn, stride, pad):
        p, b = self.m.params, self.m.buffers
        y, c1 = L.conv_forward(x, p[f"{conv}.weight"], stride, pad)
        y, c2 = L.batchnorm_forward(y, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                                    b[f"{bn}.running_mean"], b[f"{bn}.running_var"],
                                    self.train, BN_MOMENTUM, BN_EPS, self.update_stats)
        return y, (conv, bn, c1, c2)


def _conv_bn_backward(dy, cache, grads):
    conv, bn, c1, c2 = cache
    dy, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = L.batchnorm_backward(dy, c2)
    dx, grads[f"{conv}.weight"] = L.conv_backward(dy, c1)
    return dx


def _forward(m: CnnModel, x, train, update_stats=True):
    a = m.arch
    run = _Pass(m, train, update_stats)
    caches = run.caches
    y, c = run.conv_bn(x, "stem.conv", "stem.bn", a.stem_stride, a.stem_kernel // 2)
    caches.append(("conv_bn", c))
    y, c = L.relu_forward(y)
    caches.append(("relu", c))
    if a.stem_pool:
        y, c = L.maxpool_forward(y, 3, 2, 1)
        caches.append(("maxpool", c))
    for s, b, cin, cout, stride in a._blocks():
        p = f"stage{s}.{b}"
        h, c1 = run.conv_bn(y, f"{p}.conv1", f"{p}.bn1", stride, 1)
        h, r1 = L.relu_forward(h)
        h, c2 = run.conv_bn(h, f"{p}.conv2", f"{p}.bn2", 1, 1)
        if stride != 1 or cin != cout:
            sc, cd = run.conv_bn(y, f"{p}.down.conv", f"{p}.down.bn", stride, 0)
        else:
            sc, cd = y, None
        y, r2 = L.relu_forward(h + sc)
        caches.append(("block", (c1, r1, c2, cd, r2)))
    feats, c = L.global_avg_pool_forward(y)
    caches.append(("gap", c))
    logits, c = L.linear_forward(feats, m.params["head.weight"], m.params["head.bias"])
    caches.append(("linear", c))
    return feats, logits, caches


def _backward(m: CnnModel, caches, dlogits) -> dict:
    grads = {}
    d = dlogits
    for kind, c in reversed(caches):
        if kind == "linear":
            d, grads["head.weight"], grads["head.bias"] = L.linear_backward(d, c)
        elif kind == "gap":
            d = L.global_avg_pool_backward(d, c)
        elif kind == "block":
            c1, r1, c2, cd, r2 = c
            d = L.relu_backward(d, r2)
            dsc = _conv_bn_backward(d, cd, grads) if cd is not None else d
            dh = _conv_bn_backward(d, c2, grads)
            dh = L.relu_backward(dh, r1)
            d = _conv_bn_backward(dh, c1, grads) + dsc
        elif kind == "maxpool":
            d = L.maxpool_backward(d, c)
        elif kind == "relu":
            d = L.relu_backward(d, c)
        elif kind == "conv_bn":
            d = _conv_bn_backward(d, c, grads)
    return grads


def forward(m: CnnModel, batch, mode="eval"):
    """Return ``(features, logits)``; train mode updates batchnorm statistics."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    feats, logits, _ = _forward(m, _as_batch(m, batch), mode == "train")
    return feats, logits


def _check_labels(m, labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= m.k):
        raise LabelRangeError(f"labels must be in [0, {m.k})")
    return labels


def loss_and_grads(m: CnnModel, batch, labels, update_stats=False):
    """Mean cross-entropy of a train-mode forward pass and its parameter gradients."""
    x = _as_batch(m, batch)
    labels = _check_labels(m, labels, x.shape[0])
    _, logits, caches = _forward(m, x, True, update_stats)
    loss, dlogits = L.cross_entropy(logits, labels)
    return loss, _backward(m, caches, dlogits.astype(m.dtype, copy=False))


def train_step(m: CnnModel, batch, pseudo_labels, cfg: TrainConfig) -> float:
    """One SGD-with-momentum step on the batch; returns the pre-update loss.

    Weight decay is added to the gradient before the momentum update. A zero
    learning rate freezes the model completely: batchnorm running statistics
    are left alone too.
    """
    frozen = cfg.learning_rate == 0
    loss, grads = loss_and_grads(m, batch, pseudo_labels, update_stats=not frozen)
    if frozen:
        return loss
    lr, mom, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    for name, g in grads.items():
        w = m.params[name]
        if wd:
            g = g + wd * w
        v = m.velocity.get(name)
        if v is None:
            v = m.velocity[name] = np.zeros_like(w)
        v *= mom
        v += g
        if lr:
            w -= lr * v
    return loss


def extract_features(m: CnnModel, tiles, batch_size: int = 256) -> np.ndarray:
    """Eval-mode pooled features, one row per tile, as float64."""
    x = getattr(tiles, "pixels", tiles)
    n = len(x)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out = np.empty((n, m.feature_dim), dtype=np.float64)
    for s in range(0, n, batch_size):
        feats, _ = forward(m, x[s:s + batch_size], "eval")
        out[s:s + batch_size] = feats
    return out
