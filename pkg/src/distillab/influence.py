"""Exact leave-one-out influence of distilled images on test losses.

Influence here is literal retraining, not an approximation: remove one
distilled point, retrain from the same initialization with the same
deterministic full-batch schedule, and record how every test example's loss
moved. Positive influence means the point was helping.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, SyntheticSet
from .models import ModelSpec, init, penultimate_features
from .stats import pearson
from .training import TrainConfig, evaluate, train


class InfluenceError(Exception):
    pass


@dataclass
class InfluenceMatrix:
    """(distilled, test) loss differences: entry (d, t) is the increase in
    test loss at t when d is left out of training."""

    values: np.ndarray  # (S, T)
    distilled_ids: list[int]
    test_ids: list[int]
    training_digest: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.distilled_ids), len(self.test_ids)):
            raise InfluenceError(
                f"matrix shape {self.values.shape} does not match id lists "
                f"({len(self.distilled_ids)}, {len(self.test_ids)})"
            )
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise InfluenceError("influence matrix contains non-finite entries")

    def row(self, distilled_id: int) -> np.ndarray:
        return self.values[self.distilled_ids.index(distilled_id)]


def _default_cfg(seed: int) -> TrainConfig:
    # full batch: LOO differences must reflect the removed point, not batch noise
    return TrainConfig(lr=0.01, momentum=0.9, iterations=300, batch=None, seed=seed,
                       record_every=300)


def _retrain_losses(spec, params0, images, labels, num_classes, test, cfg) -> np.ndarray:
    traj = train(spec, params0, (images, labels), cfg)
    return evaluate(spec, traj.final_params(), test).losses


def loo_influence(
    spec: ModelSpec,
    synthetic: SyntheticSet,
    test: Dataset,
    cfg: TrainConfig | None = None,
    init_seed: int = 0,
    jobs: int = 1,
) -> InfluenceMatrix:
    """Train on all points, then retrain once per left-out point from the same
    initialization; entries are per-example cross-entropy differences."""
    s = len(synthetic)
    if s < 2:
        raise InfluenceError("leave-one-out needs at least 2 training points")
    cfg = cfg or _default_cfg(init_seed)
    params0 = init(spec, "xavier_uniform", seed=init_seed)
    full_losses = _retrain_losses(
        spec, params0, synthetic.images, synthetic.labels, synthetic.num_classes, test, cfg
    )

    def one(d: int) -> np.ndarray:
        keep = np.arange(s) != d
        losses = _retrain_losses(
            spec,
            params0.copy(),
            synthetic.images[keep],
            synthetic.labels[keep],
            synthetic.num_classes,
            test,
            cfg,
        )
        return losses - full_losses

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, range(s)))
    else:
        rows = [one(d) for d in range(s)]
    return InfluenceMatrix(
        np.stack(rows),
        list(range(s)),
        list(range(len(test))),
        f"{synthetic.digest()}|{cfg.digest()}|init{init_seed}",
    )


def real_background_influence(
    spec: ModelSpec,
    synthetic: SyntheticSet,
    background: Dataset,
    test: Dataset,
    cfg: TrainConfig | None = None,
    init_seed: int = 0,
    jobs: int = 1,
) -> InfluenceMatrix:
    """Influence against a real background set: loss(background-trained) minus
    loss(background+point-trained), so positive still means helpful."""
    cfg = cfg or _default_cfg(init_seed)
    params0 = init(spec, "xavier_uniform", seed=init_seed)
    base_losses = _retrain_losses(
        spec, params0, background.images, background.labels, background.num_classes, test, cfg
    )

    def one(d: int) -> np.ndarray:
        images = np.concatenate([background.images, synthetic.images[d : d + 1]])
        labels = np.concatenate([background.labels, synthetic.labels[d : d + 1]])
        losses = _retrain_losses(
            spec, params0.copy(), images, labels, background.num_classes, test, cfg
        )
        return base_losses - losses

    s = len(synthetic)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, range(s)))
    else:
        rows = [one(d) for d in range(s)]
    return InfluenceMatrix(
        np.stack(rows) if s else np.empty((0, len(test))),
        list(range(s)),
        list(range(len(test))),
        f"{synthetic.digest()}|{background.digest()}|{cfg.digest()}|init{init_seed}",
    )


def seed_consistency(a: InfluenceMatrix, b: InfluenceMatrix) -> list[float | None]:
    """Row-wise Pearson correlation; None marks zero-variance rows."""
    if a.values.shape != b.values.shape:
        raise InfluenceError(f"matrix shapes differ: {a.values.shape} vs {b.values.shape}")
    out: list[float | None] = []
    for ra, rb in zip(a.values, b.values):
        try:
            out.append(pearson(ra, rb))
        except ValueError:
            out.append(None)
    return out


def attribute_pr_curve(
    influence_row: np.ndarray,
    attribute: np.ndarray,
    test_labels: np.ndarray,
    class_filter: int,
):
    """Rank the class-filtered test set by descending influence and sweep a
    precision/recall curve for the binary attribute; AP by step interpolation.

    Returns (precision array, recall array, average precision).
    """
    influence_row = np.asarray(influence_row, dtype=np.float64)
    mask = np.asarray(test_labels) == class_filter
    scores = influence_row[mask]
    positives = np.asarray(attribute, dtype=bool)[mask]
    if positives.sum() == 0:
        raise InfluenceError(f"no positive attribute examples within class {class_filter}")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    recall = tp / positives.sum()
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precision, recall):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return precision, recall, float(ap)


@dataclass
class ClassInfluenceRecord:
    distilled_id: int
    in_class_mean: float
    out_class_mean: float | None
    variance: float
    out_class_in_top_k: dict[int, int]


def class_influence_stats(
    matrix: InfluenceMatrix,
    distilled_labels: np.ndarray,
    test_labels: np.ndarray,
    top_k: tuple[int, ...] = (10, 100),
) -> list[ClassInfluenceRecord]:
    """Per distilled point: mean influence on same-class vs other-class test
    images, row variance, and how many other-class images crack the top k."""
    test_labels = np.asarray(test_labels)
    records = []
    for i, d in enumerate(matrix.distilled_ids):
        row = matrix.values[i]
        same = test_labels == distilled_labels[i]
        in_mean = float(row[same].mean()) if same.any() else float("nan")
        out_mean = float(row[~same].mean()) if (~same).any() else None
        order = np.argsort(-row, kind="stable")
        top = {
            k: int(np.sum(~same[order[: min(k, row.size)]])) for k in top_k
        }
        records.append(
            ClassInfluenceRecord(d, in_mean, out_mean, float(row.var()), top)
        )
    return records


def influence_vs_feature_distance(
    matrix: InfluenceMatrix,
    spec: ModelSpec,
    trained_params,
    synthetic: SyntheticSet,
    test: Dataset,
) -> list[float | None]:
    """Pearson correlation between a distilled point's influence row and its
    penultimate-feature distance to each test image, under a real-trained model."""
    feats_s = penultimate_features(spec, trained_params, synthetic.images)
    feats_t = penultimate_features(spec, trained_params, test.images)
    out: list[float | None] = []
    for i in range(len(synthetic)):
        dists = np.linalg.norm(feats_t - feats_s[i], axis=1)
        try:
            out.append(pearson(matrix.values[i], dists))
        except ValueError:
            out.append(None)
    return out


# ---------------------------------------------------------------------------
# persistence: CSV matrix + JSON sidecar


def save_influence(path_csv, matrix: InfluenceMatrix, sidecar_path=None) -> None:
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distilled_id"] + [str(t) for t in matrix.test_ids])
        for i, d in enumerate(matrix.distilled_ids):
            writer.writerow([d] + [repr(float(v)) for v in matrix.values[i]])
    if sidecar_path is not None:
        with open(sidecar_path, "w") as fh:
            json.dump(
                {
                    "training_digest": matrix.training_digest,
                    "num_distilled": len(matrix.distilled_ids),
                    "num_test": len(matrix.test_ids),
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


def load_influence(path_csv, training_digest: str = "") -> InfluenceMatrix:
    with open(path_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        test_ids = [int(t) for t in header[1:]]
        distilled_ids = []
        rows = []
        for row in reader:
            distilled_ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    return InfluenceMatrix(np.asarray(rows), distilled_ids, test_ids, training_digest)
