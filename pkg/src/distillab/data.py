"""Desk-scale dataset generation, ingestion, and the distilled-data container.

Real data is procedural: each class is a geometric template (shape, position,
color) rendered with per-image jitter and pixel noise, all scaled by one noise
parameter so that sigma = 0 collapses every class to a single image. Jitter is
bucketed into per-image attributes (dominant tint channel, position quadrant)
so attribute-level influence analysis has ground truth without any external
annotator.
"""

from __future__ import annotations

import colorsys
import csv
import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .stats import kde


class DataError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    synthetic_mask: np.ndarray | None = None  # provenance from mix()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"images {self.images.shape} and labels {self.labels.shape} do not agree"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            self.split,
            {k: v[idx] for k, v in self.attributes.items()},
            None if self.synthetic_mask is None else self.synthetic_mask[idx],
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SynthMeta:
    method: str
    ipc: int
    seed: int
    init_mode: str
    iterations: int
    clipped: bool = False
    clip_fraction: float = 0.0


@dataclass
class SyntheticSet:
    """Learnable distilled images with fixed labels; pixels may leave [0, 1]."""

    images: np.ndarray  # (S, C, H, W) float64
    labels: np.ndarray  # (S,) int64, immutable after creation
    num_classes: int
    meta: SynthMeta

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labels.setflags(write=False)
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if not np.all(counts == self.meta.ipc):
            raise DataError(f"per-class counts {counts.tolist()} != ipc {self.meta.ipc}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# procedural blob data

_SHAPES = ("disk", "square", "cross", "ring", "diamond", "stripes")
_SPLIT_IDS = {"train": 0, "test": 1}
_POS_JITTER = 16.0  # px std per unit sigma
_BACKGROUND = 0.12


def _class_geometry(num_classes: int, image_shape, geometry_seed: int):
    c, h, w = image_shape
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xB10B, geometry_seed)))
    geo = []
    for k in range(num_classes):
        hue = (k / num_classes + rng.uniform(0.0, 0.5 / num_classes)) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
        center = np.array(
            [rng.uniform(0.32, 0.68) * h, rng.uniform(0.32, 0.68) * w]
        )
        radius = rng.uniform(0.18, 0.26) * min(h, w)
        geo.append((_SHAPES[k % len(_SHAPES)], center, radius, color))
    return geo


def _render(shape: str, center, radius, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - center[0]
    dx = xx - center[1]
    if shape == "disk":
        return (dy * dy + dx * dx <= radius * radius).astype(np.float64)
    if shape == "square":
        return (np.maximum(np.abs(dy), np.abs(dx)) <= radius).astype(np.float64)
    if shape == "cross":
        arm = radius / 2.4
        box = np.maximum(np.abs(dy), np.abs(dx)) <= radius
        return (box & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))).astype(np.float64)
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return ((d2 <= radius * radius) & (d2 >= (0.45 * radius) ** 2)).astype(np.float64)
    if shape == "diamond":
        return (np.abs(dy) + np.abs(dx) <= 1.2 * radius).astype(np.float64)
    if shape == "stripes":
        box = np.maximum(np.abs(dy), np.abs(dx)) <= radius
        return (box & (np.floor(dy / 2.0) % 2 == 0)).astype(np.float64)
    raise DataError(f"unknown shape {shape!r}")


def generate_blobs(
    num_classes: int,
    per_class: int,
    image_shape: tuple[int, int, int] = (3, 16, 16),
    class_geometry_seed: int = 0,
    noise_sigma: float = 0.1,
    split: str = "train",
    seed: int = 0,
) -> Dataset:
    """Procedural labeled images; train/test use disjoint RNG streams."""
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    c, h, w = image_shape
    if h < 8 or w < 8:
        raise DataError(f"image shape {image_shape} too small for templates (minimum 8x8)")
    if split not in _SPLIT_IDS:
        raise DataError(f"unknown split {split!r}")
    geo = _class_geometry(num_classes, image_shape, class_geometry_seed)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(0xDA7A, seed, _SPLIT_IDS[split]))
    )
    n = num_classes * per_class
    images = np.empty((n, c, h, w), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    tint = np.empty(n, dtype=np.int64)
    quadrant = np.empty(n, dtype=np.int64)
    i = 0
    for k, (shape, center, radius, color) in enumerate(geo):
        for _ in range(per_class):
            offset = rng.normal(0.0, noise_sigma * _POS_JITTER, size=2)
            jitter = rng.normal(0.0, 2.0 * noise_sigma, size=3)[:c]
            noise = rng.normal(0.0, noise_sigma, size=(c, h, w))
            pos = np.clip(center + np.round(offset), 2.0, [h - 3.0, w - 3.0])
            mask = _render(shape, pos, radius, h, w)
            col = np.clip(color[:c] + jitter, 0.05, 1.0)
            img = np.full((c, h, w), _BACKGROUND) + mask[None] * (col[:, None, None] - _BACKGROUND)
            images[i] = img + noise
            labels[i] = k
            tint[i] = int(np.argmax(jitter)) if c > 1 else 0
            quadrant[i] = (2 if offset[0] >= 0 else 0) + (1 if offset[1] >= 0 else 0)
            i += 1
    return Dataset(
        images, labels, num_classes, split, {"tint": tint, "quadrant": quadrant}
    )


def generate_blob_splits(
    num_classes: int,
    per_class_train: int,
    per_class_test: int,
    image_shape: tuple[int, int, int] = (3, 16, 16),
    class_geometry_seed: int = 0,
    noise_sigma: float = 0.1,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    args = (num_classes,)
    kw = dict(
        image_shape=image_shape,
        class_geometry_seed=class_geometry_seed,
        noise_sigma=noise_sigma,
        seed=seed,
    )
    train = generate_blobs(*args, per_class_train, split="train", **kw)
    test = generate_blobs(*args, per_class_test, split="test", **kw)
    return train, test


# ---------------------------------------------------------------------------
# distilled-set operations


def fraction_outside_unit(images: np.ndarray) -> float:
    images = np.asarray(images)
    return float(np.mean((images < 0.0) | (images > 1.0)))


def clip_to_unit(s: SyntheticSet) -> SyntheticSet:
    frac = fraction_outside_unit(s.images)
    clipped = np.clip(s.images, 0.0, 1.0)
    return SyntheticSet(
        clipped,
        s.labels.copy(),
        s.num_classes,
        replace(s.meta, clipped=True, clip_fraction=frac),
    )


def pixel_density(images: np.ndarray, bandwidth: float | None = None):
    """(value, density) table of pixel intensities, Gaussian KDE, Silverman rule."""
    pixels = np.asarray(images, dtype=np.float64).ravel()
    if pixels.size == 0:
        raise DataError("pixel_density: empty input")
    if pixels.std() == 0.0:
        # degenerate constant image: represent as a narrow spike
        return kde(pixels + np.linspace(-1e-9, 1e-9, pixels.size), bandwidth=1e-6)
    return kde(pixels, bandwidth=bandwidth)


def mix(real: Dataset, synthetic: SyntheticSet, real_per_class: int, seed: int = 0) -> Dataset:
    """Union of a distilled set with a seeded random real subset (k per class)."""
    if real.num_classes != synthetic.num_classes:
        raise DataError("mix: class sets differ")
    if real_per_class < 0:
        raise DataError("mix: real_per_class must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x313C, seed)))
    chosen: list[np.ndarray] = []
    for k in range(real.num_classes):
        idx = real.class_indices(k)
        if real_per_class > idx.size:
            raise DataError(
                f"mix: requested {real_per_class} real images for class {k}, only {idx.size} available"
            )
        chosen.append(rng.choice(idx, size=real_per_class, replace=False))
    picks = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    images = np.concatenate([synthetic.images, real.images[picks]])
    labels = np.concatenate([synthetic.labels, real.labels[picks]])
    mask = np.concatenate(
        [np.ones(len(synthetic), dtype=np.int64), np.zeros(picks.size, dtype=np.int64)]
    )
    return Dataset(images, labels, real.num_classes, "train", synthetic_mask=mask)


# ---------------------------------------------------------------------------
# file formats

_MAGIC = b"DDLB"
_VERSION = 1
_LABEL_WIDTH = 2  # bytes per label (uint16)


def _write_header(fh, images: np.ndarray, labels: np.ndarray, num_classes: int, split: str):
    n, c, h, w = images.shape
    fh.write(_MAGIC)
    fh.write(struct.pack(_HEADER_FMT, _VERSION, n, c, h, w, _LABEL_WIDTH,
                         _SPLIT_IDS.get(split, 0), num_classes))
    fh.write(labels.astype("<u2").tobytes())
    fh.write(images.astype("<f8").tobytes())


_HEADER_FMT = "<HIIIIBBH"


def _read_header(fh, path):
    if fh.read(4) != _MAGIC:
        raise DataError(f"{path}: bad magic")
    version, n, c, h, w, lw, split_id, num_classes = struct.unpack(
        _HEADER_FMT, fh.read(struct.calcsize(_HEADER_FMT))
    )
    if version != _VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if lw != _LABEL_WIDTH:
        raise DataError(f"{path}: unsupported label width {lw}")
    labels = np.frombuffer(fh.read(lw * n), dtype="<u2").astype(np.int64)
    images = np.frombuffer(fh.read(8 * n * c * h * w), dtype="<f8").astype(np.float64)
    split = "test" if split_id == 1 else "train"
    return images.reshape(n, c, h, w), labels, num_classes, split


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, ds.images, ds.labels, ds.num_classes, ds.split)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        images, labels, num_classes, split = _read_header(fh, path)
    return Dataset(images, labels, num_classes, split)


def save_synthetic(path, s: SyntheticSet) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, s.images, s.labels, s.num_classes, "train")
        m = s.meta
        fh.write(_pack_str(m.method))
        fh.write(struct.pack("<IQ", m.ipc, m.seed))
        fh.write(_pack_str(m.init_mode))
        fh.write(struct.pack("<IBd", m.iterations, int(m.clipped), m.clip_fraction))


def load_synthetic(path) -> SyntheticSet:
    with open(path, "rb") as fh:
        images, labels, num_classes, _ = _read_header(fh, path)
        method = _unpack_str(fh)
        ipc, seed = struct.unpack("<IQ", fh.read(12))
        init_mode = _unpack_str(fh)
        iterations, clipped, clip_fraction = struct.unpack("<IBd", fh.read(13))
    meta = SynthMeta(method, ipc, seed, init_mode, iterations, bool(clipped), clip_fraction)
    return SyntheticSet(images, labels, num_classes, meta)


def save_attributes(path, ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_index", "attribute_name", "value"])
        for name in sorted(ds.attributes):
            for i, v in enumerate(ds.attributes[name]):
                writer.writerow([i, name, int(v)])


def load_attributes(path, n: int) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["attribute_name"], [None] * n)[int(row["image_index"])] = int(
                row["value"]
            )
    return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}
