"""ConvNet models over the autodiff engine, with a binary checkpoint format.

A depth-d model is d blocks of [3x3 conv -> batch norm -> ReLU -> 2x2 avg
pool] followed by a single linear classifier. Batch-norm layers support
three forward modes:

  train          normalize by batch statistics, update running statistics
  frozen-capture normalize by stored running statistics, touch nothing,
                 and expose the batch statistics (and the raw layer input)
                 as graph nodes for alignment losses
  inference      normalize by stored running statistics
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    avg_pool2d,
    batch_norm_train,
    channel_affine,
    channel_mean,
    channel_var,
    conv2d,
    grad_enabled,
    matmul,
    no_grad,
    relu,
    reshape,
)

MODE_TRAIN = "train"
MODE_CAPTURE = "frozen-capture"
MODE_INFER = "inference"
_MODES = (MODE_TRAIN, MODE_CAPTURE, MODE_INFER)

CHECKPOINT_MAGIC = b"LTDDNET1"
_BN_MOMENTUM = 0.1


class CheckpointFormatError(ValueError):
    """Raised on bad magic, truncation, or inconsistent checkpoint headers."""


@dataclass(frozen=True)
class ConvNetSpec:
    """Architecture description: conv-block count, width, input geometry."""

    depth: int
    width: int
    in_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.bn_eps <= 0:
            raise ValueError(f"bn_eps must be positive, got {self.bn_eps}")
        if len(self.in_shape) != 3 or any(int(d) < 1 for d in self.in_shape):
            raise ValueError(f"in_shape must be 3 positive dims, got {self.in_shape}")
        _, h, w = self.in_shape
        if h % (1 << self.depth) or w % (1 << self.depth):
            raise ValueError(
                f"input {h}x{w} not divisible by 2^depth={1 << self.depth}"
            )

    @property
    def feature_dim(self) -> int:
        _, h, w = self.in_shape
        return self.width * (h >> self.depth) * (w >> self.depth)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "width": self.width,
            "in_shape": list(self.in_shape),
            "num_classes": self.num_classes,
            "bn_eps": self.bn_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConvNetSpec":
        return ConvNetSpec(
            depth=int(d["depth"]),
            width=int(d["width"]),
            in_shape=tuple(int(x) for x in d["in_shape"]),
            num_classes=int(d["num_classes"]),
            bn_eps=float(d["bn_eps"]),
        )


class ConvLayer:
    def __init__(self, w: np.ndarray):
        self.w = Tensor(w, requires_grad=True)

    def params(self):
        return [self.w]

    def state_arrays(self):
        return [self.w.data]


class BatchNormLayer:
    def __init__(self, gamma, beta, running_mean, running_var, eps: float):
        self.gamma = Tensor(gamma, requires_grad=True)
        self.beta = Tensor(beta, requires_grad=True)
        self.running_mean = np.asarray(running_mean, dtype=np.float32)
        self.running_var = np.asarray(running_var, dtype=np.float32)
        self.eps = float(eps)

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [self.gamma.data, self.beta.data, self.running_mean, self.running_var]

    def forward(self, x: Tensor, mode: str):
        c = x.shape[1]
        if mode == MODE_TRAIN:
            out, m, v = batch_norm_train(x, self.gamma, self.beta, self.eps)
            self.running_mean = (
                (1.0 - _BN_MOMENTUM) * self.running_mean + _BN_MOMENTUM * m
            ).astype(np.float32)
            self.running_var = (
                (1.0 - _BN_MOMENTUM) * self.running_var + _BN_MOMENTUM * v
            ).astype(np.float32)
            return out, Tensor(m), Tensor(v)
        # stored-statistics normalization; batch moments still reported, and
        # differentiable in capture mode for the alignment losses
        m = channel_mean(x)
        v = channel_var(x)
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        affine_ok = not (
            grad_enabled() and (self.gamma.requires_grad or self.beta.requires_grad)
        )
        if affine_ok:
            scale = self.gamma.data * inv
            shift = self.beta.data - self.running_mean * scale
            out = channel_affine(x, scale, shift)
        else:
            xh = (x - self.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
            out = xh * reshape(self.gamma, (1, c, 1, 1)) + reshape(
                self.beta, (1, c, 1, 1)
            )
        return out, m, v


class LinearLayer:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def params(self):
        return [self.w, self.b]

    def state_arrays(self):
        return [self.w.data, self.b.data]

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


@dataclass
class ForwardResult:
    logits: Tensor
    features: Tensor
    bn_means: list  # per BN layer, (channels,) Tensor of batch means
    bn_vars: list  # per BN layer, (channels,) Tensor of batch variances
    bn_inputs: list  # per BN layer, the raw (B, C, H, W) input Tensor

    def batch_stats(self):
        """Per-layer (mean, variance) numpy pairs, the spec-level view."""
        return [(m.data.copy(), v.data.copy()) for m, v in zip(self.bn_means, self.bn_vars)]


class Model:
    """Ordered conv blocks plus classifier; BN layers indexed 1..L in order."""

    def __init__(self, spec: ConvNetSpec, convs, bns, classifier):
        self.spec = spec
        self.convs = convs
        self.bns = bns
        self.classifier = classifier

    @property
    def num_bn_layers(self) -> int:
        return len(self.bns)

    def params(self):
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out.extend(conv.params())
            out.extend(bn.params())
        out.extend(self.classifier.params())
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def forward(self, batch, mode: str = MODE_INFER) -> ForwardResult:
        if mode not in _MODES:
            raise ValueError(f"unknown forward mode {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.in_shape):
            raise ValueError(
                f"batch shape {tuple(x.shape)} does not match input {self.spec.in_shape}"
            )
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        bn_means, bn_vars, bn_inputs = [], [], []
        for conv, bn in zip(self.convs, self.bns):
            x = conv2d(x, conv.w, padding=1)
            bn_inputs.append(x)
            x, m, v = bn.forward(x, mode)
            bn_means.append(m)
            bn_vars.append(v)
            x = relu(x)
            x = avg_pool2d(x, 2)
        feats = reshape(x, (x.shape[0], -1))
        logits = self.classifier.forward(feats)
        return ForwardResult(logits, feats, bn_means, bn_vars, bn_inputs)

    def state_bytes(self) -> bytes:
        """All parameters and running statistics, little-endian float32."""
        chunks = []
        for conv, bn in zip(self.convs, self.bns):
            for arr in conv.state_arrays() + bn.state_arrays():
                chunks.append(np.asarray(arr, dtype="<f4").tobytes())
        for arr in self.classifier.state_arrays():
            chunks.append(np.asarray(arr, dtype="<f4").tobytes())
        return b"".join(chunks)


def build_model(spec: ConvNetSpec, seed: int) -> Model:
    """Deterministically initialized model: fan-in-scaled uniform weights,
    zero biases, identity BN affine, zero-mean/unit-variance running stats."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    convs, bns = [], []
    cin = spec.in_shape[0]
    for _ in range(spec.depth):
        fan_in = cin * 9
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=(spec.width, cin, 3, 3)).astype(np.float32)
        convs.append(ConvLayer(w))
        bns.append(
            BatchNormLayer(
                gamma=np.ones(spec.width, dtype=np.float32),
                beta=np.zeros(spec.width, dtype=np.float32),
                running_mean=np.zeros(spec.width, dtype=np.float32),
                running_var=np.ones(spec.width, dtype=np.float32),
                eps=spec.bn_eps,
            )
        )
        cin = spec.width
    fan_in = spec.feature_dim
    limit = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-limit, limit, size=(fan_in, spec.num_classes)).astype(np.float32)
    b = np.zeros(spec.num_classes, dtype=np.float32)
    return Model(spec, convs, bns, LinearLayer(w, b))


def forward(model: Model, batch, mode: str):
    """Spec-level forward: returns (logits, per-BN-layer (mean, var) pairs)."""
    res = model.forward(batch, mode)
    return res.logits, res.batch_stats()


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits for a (N, C, H, W) float array, batched."""
    outs = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            res = model.forward(Tensor(images[start : start + batch_size]), MODE_INFER)
            outs.append(res.logits.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# layout: magic, u32 version, u32 depth/width/in_c/in_h/in_w/num_classes,
# f32 bn_eps, u32 json-metadata length + bytes, u8 heads flag, then per layer
# in order the parameter arrays and BN running statistics as little-endian
# float32 (conv w; bn gamma, beta, running mean, running var; classifier w, b;
# optionally the projection/prediction head arrays).


def _head_shapes(feature_dim: int):
    d = feature_dim
    return [(d, d), (d,), (d, d), (d,), (d, d), (d,)]


def _model_array_shapes(spec: ConvNetSpec):
    shapes = []
    cin = spec.in_shape[0]
    for _ in range(spec.depth):
        shapes.append((spec.width, cin, 3, 3))
        shapes.extend([(spec.width,)] * 4)
        cin = spec.width
    shapes.append((spec.feature_dim, spec.num_classes))
    shapes.append((spec.num_classes,))
    return shapes


def _model_arrays(model: Model):
    arrs = []
    for conv, bn in zip(model.convs, model.bns):
        arrs.extend(conv.state_arrays() + bn.state_arrays())
    arrs.extend(model.classifier.state_arrays())
    return arrs


def checkpoint_bytes(model: Model, heads=None, meta: dict | None = None) -> bytes:
    spec = model.spec
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<7I",
            1,
            spec.depth,
            spec.width,
            spec.in_shape[0],
            spec.in_shape[1],
            spec.in_shape[2],
            spec.num_classes,
        ),
        struct.pack("<f", spec.bn_eps),
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        struct.pack("<B", 0 if heads is None else 1),
    ]
    for arr in _model_arrays(model):
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    if heads is not None:
        for arr in heads.state_arrays():
            parts.append(np.asarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: Model, heads=None, meta: dict | None = None) -> str:
    """Write the checkpoint; returns the sha256 hex digest of the file bytes."""
    blob = checkpoint_bytes(model, heads, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointFormatError("truncated checkpoint file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(4 * n)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, heads_or_None, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, depth, width, in_c, in_h, in_w, ncls = struct.unpack("<7I", r.take(28))
    if version != 1:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (bn_eps,) = struct.unpack("<f", r.take(4))
    (meta_len,) = struct.unpack("<I", r.take(4))
    meta = json.loads(r.take(meta_len).decode("utf-8")) if meta_len else {}
    (has_heads,) = struct.unpack("<B", r.take(1))
    spec = ConvNetSpec(depth, width, (in_c, in_h, in_w), ncls, bn_eps)
    spec.validate()

    convs, bns = [], []
    cin = in_c
    for _ in range(depth):
        convs.append(ConvLayer(r.array((width, cin, 3, 3))))
        gamma, beta, rm, rv = (r.array((width,)) for _ in range(4))
        bns.append(BatchNormLayer(gamma, beta, rm, rv, bn_eps))
        cin = width
    w = r.array((spec.feature_dim, ncls))
    b = r.array((ncls,))
    model = Model(spec, convs, bns, LinearLayer(w, b))

    heads = None
    if has_heads:
        from .experts import HeadStack  # local import to avoid a cycle

        arrs = [r.array(s) for s in _head_shapes(spec.feature_dim)]
        heads = HeadStack.from_arrays(arrs)
    if r.off != len(blob):
        raise CheckpointFormatError("trailing bytes in checkpoint file")
    return model, heads, meta
