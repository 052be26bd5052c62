"""Deterministic SGD training with momentum, checkpointing, and evaluation.

Everything downstream (distillation baselines, influence retraining, model
pools, curvature series) runs through this one engine, so determinism is the
contract: identical spec, data, config, and seed give bitwise-identical
trajectories.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Dataset, SyntheticSet
from .models import Layout, ModelSpec, ParamVector, forward, init


class TrainerError(Exception):
    pass


class TrainingDiverged(TrainerError):
    """Loss became non-finite; carries the last iteration that was still valid."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"training diverged after iteration {iteration}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    iterations: int = 300
    batch: int | None = None  # None = full batch
    seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainerError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainerError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TrainerError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.iterations < 1 or self.record_every < 1:
            raise TrainerError("iterations and record_every must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise TrainerError("batch size must be >= 1 (or None for full batch)")

    def digest(self) -> str:
        text = f"{self.lr}|{self.momentum}|{self.weight_decay}|{self.iterations}|{self.batch}|{self.seed}|{self.record_every}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Trajectory:
    spec: ModelSpec
    iterations: list[int]
    snapshots: list[np.ndarray]  # flat parameter copies
    train_loss: list[float]
    test_acc: list[float]  # nan when no eval set was given
    config_digest: str = ""
    data_digest: str = ""

    def params_at(self, iteration: int) -> ParamVector:
        layout = Layout.for_spec(self.spec)
        try:
            i = self.iterations.index(iteration)
        except ValueError:
            raise TrainerError(f"no snapshot recorded at iteration {iteration}") from None
        return ParamVector(self.snapshots[i].copy(), layout)

    def final_params(self) -> ParamVector:
        return self.params_at(self.iterations[-1])


@dataclass
class Snapshot:
    params: ParamVector
    iteration: int
    config_digest: str
    data_digest: str
    accuracy: float = float("nan")


@dataclass
class EvalResult:
    accuracy: float
    losses: np.ndarray  # per-example cross-entropy
    predictions: np.ndarray


def _images_labels(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, (Dataset, SyntheticSet)):
        return data.images, data.labels
    return data  # (images, labels) pair


def momentum_step(theta, velocity, gradient, lr: float, momentum: float, weight_decay: float = 0.0):
    """One classical-momentum update; returns (new_theta, new_velocity)."""
    g = gradient + weight_decay * theta if weight_decay else gradient
    velocity = momentum * velocity + g
    return theta - lr * velocity, velocity


def evaluate(spec: ModelSpec, params, data, chunk: int = 256) -> EvalResult:
    """Argmax predictions, mean accuracy, and per-example cross-entropy losses."""
    images, labels = _images_labels(data)
    losses = np.empty(len(labels), dtype=np.float64)
    preds = np.empty(len(labels), dtype=np.int64)
    with ad.no_grad():
        for lo in range(0, len(labels), chunk):
            hi = min(lo + chunk, len(labels))
            logits = forward(spec, params, Tensor(images[lo:hi]))
            logp = ad.log_softmax(logits).data
            losses[lo:hi] = -logp[np.arange(hi - lo), labels[lo:hi]]
            preds[lo:hi] = np.argmax(logits.data, axis=1)
    accuracy = float(np.mean(preds == labels)) if len(labels) else float("nan")
    return EvalResult(accuracy, losses, preds)


def _full_loss(spec, values, images, labels, chunk: int = 512) -> float:
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(labels), chunk):
            hi = min(lo + chunk, len(labels))
            loss = ad.softmax_cross_entropy(
                forward(spec, Tensor(values), Tensor(images[lo:hi])), labels[lo:hi], reduction="sum"
            )
            total += loss.item()
    return total / len(labels)


def train(
    spec: ModelSpec,
    params0: ParamVector,
    data,
    cfg: TrainConfig,
    eval_data=None,
) -> Trajectory:
    """SGD with classical momentum: v <- m v + g, theta <- theta - lr v.

    L2 weight decay is added to the gradient. Snapshots (including the
    initialization) are recorded every ``record_every`` iterations and at the
    final one; the recorded loss is the full training loss at that snapshot.
    """
    images, labels = _images_labels(data)
    if len(labels) == 0:
        raise TrainerError("training data is empty")
    data_digest = data.digest() if hasattr(data, "digest") else ""
    traj = Trajectory(spec, [], [], [], [], cfg.digest(), data_digest)

    def record(iteration: int, values: np.ndarray):
        traj.iterations.append(iteration)
        traj.snapshots.append(values.copy())
        traj.train_loss.append(_full_loss(spec, values, images, labels))
        acc = evaluate(spec, values, eval_data).accuracy if eval_data is not None else float("nan")
        traj.test_acc.append(acc)

    theta = params0.values.copy()
    velocity = np.zeros_like(theta)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x7A41, cfg.seed)))
    order = np.arange(len(labels))
    cursor = len(labels)  # force an initial shuffle in minibatch mode

    record(0, theta)
    for it in range(1, cfg.iterations + 1):
        if cfg.batch is None or cfg.batch >= len(labels):
            bi = order
        else:
            if cursor + cfg.batch > len(labels):
                order = rng.permutation(len(labels))
                cursor = 0
            bi = order[cursor : cursor + cfg.batch]
            cursor += cfg.batch
        try:
            t = Tensor(theta, requires_grad=True)
            loss = ad.softmax_cross_entropy(forward(spec, t, Tensor(images[bi])), labels[bi])
            g = ad.grad(loss, t).data
        except NonFiniteError:
            raise TrainingDiverged(it - 1) from None
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(it - 1)
        theta, velocity = momentum_step(theta, velocity, g, cfg.lr, cfg.momentum, cfg.weight_decay)
        if it % cfg.record_every == 0 or it == cfg.iterations:
            record(it, theta)
    return traj


def stratified_subset(data: Dataset, fraction: float, seed: int) -> np.ndarray:
    """Seeded class-stratified sample of round(fraction * per-class count)."""
    if not 0.0 < fraction <= 1.0:
        raise TrainerError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x5AB5, seed)))
    picks = []
    for k in range(data.num_classes):
        idx = data.class_indices(k)
        take = int(round(fraction * idx.size))
        if take < 1:
            raise TrainerError(f"subset is empty for class {k} at fraction {fraction}")
        picks.append(rng.choice(idx, size=take, replace=False))
    return np.sort(np.concatenate(picks))


def train_subset(
    spec: ModelSpec,
    data: Dataset,
    fraction: float,
    cfg: TrainConfig,
    eval_data=None,
) -> Trajectory:
    """Train on a seeded stratified subsample; init is derived from cfg.seed."""
    idx = stratified_subset(data, fraction, cfg.seed)
    params0 = init(spec, "xavier_uniform", seed=cfg.seed)
    return train(spec, params0, data.subset(idx), cfg, eval_data=eval_data)


def early_stop_select(traj: Trajectory, target_accuracy: float) -> Snapshot:
    """Snapshot at the recorded iteration whose accuracy is closest to target.

    Ties resolve to the earliest iteration.
    """
    accs = np.asarray(traj.test_acc, dtype=np.float64)
    if accs.size == 0 or np.all(np.isnan(accs)):
        raise TrainerError("trajectory has no recorded accuracies")
    gaps = np.abs(accs - target_accuracy)
    i = int(np.nanargmin(gaps))
    return Snapshot(
        ParamVector(traj.snapshots[i].copy(), Layout.for_spec(traj.spec)),
        traj.iterations[i],
        traj.config_digest,
        traj.data_digest,
        accuracy=float(accs[i]),
    )


# ---------------------------------------------------------------------------
# persistence: a trajectory is a directory of snapshot files plus a manifest

_SNAP_MAGIC = b"DDSN"


def save_snapshot(path, snap: Snapshot, spec: ModelSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<HQ", 1, snap.iteration))
        fh.write(snap.config_digest.ljust(16)[:16].encode())
        fh.write(snap.data_digest.ljust(16)[:16].encode())
        fh.write(struct.pack("<dQQ", snap.accuracy, spec.digest(), len(snap.params)))
        fh.write(snap.params.values.astype("<f8").tobytes())


def load_snapshot(path, spec: ModelSpec) -> Snapshot:
    layout = Layout.for_spec(spec)
    with open(path, "rb") as fh:
        if fh.read(4) != _SNAP_MAGIC:
            raise TrainerError(f"{path}: bad magic")
        _, iteration = struct.unpack("<HQ", fh.read(10))
        cfg_digest = fh.read(16).decode().strip()
        data_digest = fh.read(16).decode().strip()
        accuracy, spec_digest, n = struct.unpack("<dQQ", fh.read(24))
        if spec_digest != spec.digest():
            raise TrainerError(f"{path}: snapshot was written for a different model spec")
        if n != layout.size:
            raise TrainerError(f"{path}: expected {layout.size} parameters, file has {n}")
        values = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
    return Snapshot(ParamVector(values, layout), int(iteration), cfg_digest, data_digest, accuracy)


def save_trajectory(directory, traj: Trajectory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "accuracy", "snapshot_file"])
        for i, it in enumerate(traj.iterations):
            name = f"iter{it:06d}.ddsn"
            writer.writerow([it, repr(traj.train_loss[i]), repr(traj.test_acc[i]), name])
            snap = Snapshot(
                ParamVector(traj.snapshots[i], Layout.for_spec(traj.spec)),
                it,
                traj.config_digest,
                traj.data_digest,
                traj.test_acc[i],
            )
            save_snapshot(directory / name, snap, traj.spec)


def load_trajectory(directory, spec: ModelSpec) -> Trajectory:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise TrainerError(f"{directory}: no trajectory manifest found")
    traj = Trajectory(spec, [], [], [], [])
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            snap = load_snapshot(directory / row["snapshot_file"], spec)
            traj.iterations.append(int(row["iteration"]))
            traj.snapshots.append(snap.params.values)
            traj.train_loss.append(float(row["loss"]))
            traj.test_acc.append(float(row["accuracy"]))
            traj.config_digest = snap.config_digest
            traj.data_digest = snap.data_digest
    return traj
