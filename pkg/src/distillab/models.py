"""Trainable model family: a small ConvNet, an MLP, and deterministic initializers.

Parameters live in a single flat float64 vector with a layout table, so the
same model code serves plain training, differentiable unrolled training, and
Hessian analysis (which all want a flat parameter view).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "convnet" | "mlp"
    depth: int = 3
    width: int = 32
    input_shape: tuple[int, int, int] = (3, 16, 16)  # (C, H, W)
    num_classes: int = 3
    norm: str = "instance_norm"  # "instance_norm" | "none"

    def __post_init__(self):
        if self.kind not in ("convnet", "mlp"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.depth < 1 or self.width < 1 or self.num_classes < 2:
            raise ModelError("depth and width must be >= 1 and num_classes >= 2")
        if self.norm not in ("instance_norm", "none"):
            raise ModelError(f"unknown norm {self.norm!r}")
        if self.kind == "convnet" and min(self.input_shape[1:]) < 2**self.depth:
            raise ModelError(
                f"input {self.input_shape} too small for {self.depth} pooling stages"
            )

    def canonical(self) -> str:
        c, h, w = self.input_shape
        return f"{self.kind}|d{self.depth}|w{self.width}|{c}x{h}x{w}|k{self.num_classes}|{self.norm}"

    def digest(self) -> int:
        return int.from_bytes(hashlib.sha256(self.canonical().encode()).digest()[:8], "little")


def _segments(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    c, h, w = spec.input_shape
    segs: list[tuple[str, tuple[int, ...]]] = []
    if spec.kind == "convnet":
        cin = c
        for i in range(spec.depth):
            segs.append((f"conv{i}.w", (spec.width, cin, 3, 3)))
            if spec.norm == "none":
                segs.append((f"conv{i}.b", (spec.width,)))
            cin = spec.width
            h, w = h // 2, w // 2
        feat = spec.width * h * w
    else:
        feat = c * h * w
        for i in range(spec.depth - 1):
            segs.append((f"fc{i}.w", (spec.width, feat)))
            segs.append((f"fc{i}.b", (spec.width,)))
            feat = spec.width
    segs.append(("head.w", (spec.num_classes, feat)))
    segs.append(("head.b", (spec.num_classes,)))
    return segs


@dataclass(frozen=True)
class Layout:
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    size: int

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "Layout":
        names, shapes, offsets = [], [], []
        off = 0
        for name, shape in _segments(spec):
            names.append(name)
            shapes.append(shape)
            offsets.append(off)
            off += int(np.prod(shape))
        return cls(tuple(names), tuple(shapes), tuple(offsets), off)

    def span(self, name: str) -> tuple[int, int]:
        i = self.names.index(name)
        start = self.offsets[i]
        return start, start + int(np.prod(self.shapes[i]))


class ParamVector:
    """Flat float64 parameter vector plus the layout that maps segments to layers."""

    def __init__(self, values: np.ndarray, layout: Layout):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (layout.size,):
            raise ModelError(f"parameter vector has {values.shape}, layout needs ({layout.size},)")
        self.values = values
        self.layout = layout

    def segment(self, name: str) -> np.ndarray:
        lo, hi = self.layout.span(name)
        i = self.layout.names.index(name)
        return self.values[lo:hi].reshape(self.layout.shapes[i])

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.layout.size


def init(spec: ModelSpec, mode: str = "xavier_uniform", seed: int = 0) -> ParamVector:
    """Deterministic initializer.

    ``xavier_uniform`` draws each weight matrix from U(-b, b) with
    b = sqrt(6 / (fan_in + fan_out)); biases start at zero. ``zeros`` gives an
    all-zero vector (useful for symmetric convex fits). ``seeded`` is an alias
    of ``xavier_uniform``.
    """
    if mode == "seeded":
        mode = "xavier_uniform"
    layout = Layout.for_spec(spec)
    values = np.zeros(layout.size, dtype=np.float64)
    if mode == "zeros":
        return ParamVector(values, layout)
    if mode != "xavier_uniform":
        raise ModelError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x1A17, seed)))
    for name, shape, offset in zip(layout.names, layout.shapes, layout.offsets):
        if name.endswith(".b"):
            continue
        if len(shape) == 4:  # conv: (out, in, kh, kw)
            fan_in = shape[1] * shape[2] * shape[3]
            fan_out = shape[0] * shape[2] * shape[3]
        else:  # linear: (out, in)
            fan_in, fan_out = shape[1], shape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        n = int(np.prod(shape))
        values[offset : offset + n] = rng.uniform(-bound, bound, size=n)
    return ParamVector(values, layout)


def _param_tensor(params: ParamVector | Tensor | np.ndarray, layout: Layout) -> Tensor:
    if isinstance(params, ParamVector):
        return Tensor(params.values)
    if isinstance(params, Tensor):
        t = params
    else:
        t = Tensor(np.asarray(params, dtype=np.float64))
    if t.shape != (layout.size,):
        raise ModelError(f"parameter tensor has shape {t.shape}, layout needs ({layout.size},)")
    return t


def _seg(theta: Tensor, layout: Layout, name: str) -> Tensor:
    lo, hi = layout.span(name)
    i = layout.names.index(name)
    return ad.reshape(ad.slice1d(theta, lo, hi), layout.shapes[i])


def forward(
    spec: ModelSpec,
    params: ParamVector | Tensor | np.ndarray,
    batch: Tensor | np.ndarray,
    return_features: bool = False,
):
    """Run the model; returns logits, or (logits, penultimate features)."""
    layout = Layout.for_spec(spec)
    theta = _param_tensor(params, layout)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ModelError(f"batch shape {x.shape} does not match input {spec.input_shape}")

    if spec.kind == "convnet":
        for i in range(spec.depth):
            w = _seg(theta, layout, f"conv{i}.w")
            b = _seg(theta, layout, f"conv{i}.b") if spec.norm == "none" else None
            x = ad.conv2d(x, w, b, stride=1, padding=1)
            if spec.norm == "instance_norm":
                x = ad.instance_norm(x)
            x = ad.relu(x)
            x = ad.avg_pool2d(x, 2)
        feats = ad.flatten(x)
    else:
        feats = ad.flatten(x)
        for i in range(spec.depth - 1):
            w = _seg(theta, layout, f"fc{i}.w")
            b = _seg(theta, layout, f"fc{i}.b")
            feats = ad.relu(ad.add(ad.matmul(feats, ad.transpose(w)), ad.reshape(b, (1, -1))))
    hw = _seg(theta, layout, "head.w")
    hb = _seg(theta, layout, "head.b")
    logits = ad.add(ad.matmul(feats, ad.transpose(hw)), ad.reshape(hb, (1, -1)))
    if return_features:
        return logits, feats
    return logits


def penultimate_features(spec: ModelSpec, params, batch) -> np.ndarray:
    with ad.no_grad():
        _, feats = forward(spec, params, batch, return_features=True)
    return feats.data


def loss_fn_for(spec: ModelSpec, images: np.ndarray, labels: np.ndarray, scale: float = 1.0):
    """Closure mapping a flat parameter Tensor to the (scaled) mean cross-entropy."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)

    def loss_fn(theta: Tensor) -> Tensor:
        loss = ad.softmax_cross_entropy(forward(spec, theta, Tensor(images)), labels)
        return ad.mul(loss, scale) if scale != 1.0 else loss

    return loss_fn


# ---------------------------------------------------------------------------
# serialization: little-endian float64 with a versioned header

_MAGIC = b"DDLP"
_VERSION = 1


def save_params(path, params: ParamVector, spec: ModelSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HQQ", _VERSION, spec.digest(), len(params)))
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path, spec: ModelSpec) -> ParamVector:
    layout = Layout.for_spec(spec)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ModelError(f"{path}: bad magic {magic!r}")
        version, digest, n = struct.unpack("<HQQ", fh.read(18))
        if version != _VERSION:
            raise ModelError(f"{path}: unsupported version {version}")
        if digest != spec.digest():
            raise ModelError(f"{path}: parameter file was written for a different model spec")
        if n != layout.size:
            raise ModelError(f"{path}: expected {layout.size} parameters, file has {n}")
        values = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)
