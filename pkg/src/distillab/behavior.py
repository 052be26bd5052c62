"""Training-behavior experiments: prediction agreement against model pools,
real/distilled mixing curves, recognition over time, clipping effects, loss
decomposition, random hyperparameter search, and a PCA feature projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Dataset, SyntheticSet, clip_to_unit, mix
from .models import ModelSpec, forward, init, penultimate_features
from .stats import normal_cdf
from .training import (
    TrainConfig,
    TrainingDiverged,
    Trajectory,
    evaluate,
    train,
    train_subset,
)


class BehaviorError(Exception):
    pass


# ---------------------------------------------------------------------------
# agreement machinery


def agreement_count(preds_a: np.ndarray, preds_b: np.ndarray) -> int:
    preds_a = np.asarray(preds_a)
    preds_b = np.asarray(preds_b)
    if preds_a.shape != preds_b.shape:
        raise BehaviorError(f"prediction lengths differ: {preds_a.shape} vs {preds_b.shape}")
    return int(np.sum(preds_a == preds_b))


@dataclass
class PoolMember:
    model_id: str
    pool: str  # subset | early_stop | weight_decay
    accuracy: float
    predictions: np.ndarray


@dataclass
class AgreementRecord:
    model_id: str
    pool: str
    accuracy: float
    agreement: int


@dataclass(frozen=True)
class PoolConfig:
    subset_models: int = 120
    subset_fraction_range: tuple[float, float] = (0.005, 0.05)
    early_stop_runs: int = 5
    early_stop_stride: int = 5
    weight_decay_models: int = 40
    weight_decay_range: tuple[float, float] = (0.05, 0.13)
    weight_decay_epochs: int = 20
    accuracy_window: float = 0.01
    iterations: int = 300
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0


def build_pools(
    real: Dataset,
    test: Dataset,
    spec: ModelSpec,
    cfg: PoolConfig,
    include_weight_decay: bool = True,
) -> dict[str, list[PoolMember]]:
    """Subset-trained, early-stopped, and (optionally) weight-decay pools.

    Subset models train to the full iteration budget on stratified subsamples;
    the early-stop pool is every recorded snapshot of full-data runs; the
    weight-decay pool trains full data for a fixed epoch count with a random
    decay strength.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x9001, cfg.seed)))
    pools: dict[str, list[PoolMember]] = {"subset": [], "early_stop": []}

    for i in range(cfg.subset_models):
        fraction = float(rng.uniform(*cfg.subset_fraction_range))
        tc = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, iterations=cfg.iterations,
                         batch=None, seed=int(rng.integers(0, 2**31)),
                         record_every=cfg.iterations)
        traj = train_subset(spec, real, fraction, tc)
        res = evaluate(spec, traj.final_params(), test)
        pools["subset"].append(
            PoolMember(f"subset{i:04d}", "subset", res.accuracy, res.predictions)
        )

    for i in range(cfg.early_stop_runs):
        tc = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, iterations=cfg.iterations,
                         batch=cfg.batch, seed=int(rng.integers(0, 2**31)),
                         record_every=cfg.early_stop_stride)
        traj = train(spec, init(spec, "xavier_uniform", seed=tc.seed), real, tc)
        for it, snap in zip(traj.iterations, traj.snapshots):
            if it == 0:
                continue
            res = evaluate(spec, snap, test)
            pools["early_stop"].append(
                PoolMember(f"early{i}_{it:04d}", "early_stop", res.accuracy, res.predictions)
            )

    if include_weight_decay:
        pools["weight_decay"] = []
        iters_per_epoch = max(1, math.ceil(len(real) / cfg.batch))
        for i in range(cfg.weight_decay_models):
            wd = float(rng.uniform(*cfg.weight_decay_range))
            tc = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=wd,
                             iterations=cfg.weight_decay_epochs * iters_per_epoch,
                             batch=cfg.batch, seed=int(rng.integers(0, 2**31)),
                             record_every=cfg.weight_decay_epochs * iters_per_epoch)
            traj = train(spec, init(spec, "xavier_uniform", seed=tc.seed), real, tc)
            res = evaluate(spec, traj.final_params(), test)
            pools["weight_decay"].append(
                PoolMember(f"wd{i:04d}", "weight_decay", res.accuracy, res.predictions)
            )
    return pools


def filter_by_accuracy(members: list[PoolMember], accuracy: float, window: float) -> list[PoolMember]:
    return [m for m in members if abs(m.accuracy - accuracy) <= window]


def agreement_records(
    members: list[PoolMember], reference_predictions: np.ndarray
) -> list[AgreementRecord]:
    return [
        AgreementRecord(m.model_id, m.pool, m.accuracy,
                        agreement_count(m.predictions, reference_predictions))
        for m in members
    ]


def agreement_probability(
    pool_predictions: list[np.ndarray], distilled_predictions: np.ndarray
) -> list[float | None]:
    """Appendix-style significance: for each pool member, fit a Normal to its
    agreements with the other members and report the CDF at the
    distilled-model agreement. None marks degenerate (zero spread) members."""
    n = len(pool_predictions)
    if n < 3:
        raise BehaviorError(f"need a pool of at least 3 models, got {n}")
    out: list[float | None] = []
    for i, mine in enumerate(pool_predictions):
        agreements = np.array(
            [agreement_count(mine, other) for j, other in enumerate(pool_predictions) if j != i],
            dtype=np.float64,
        )
        mu = float(agreements.mean())
        sigma = float(agreements.std())
        if sigma == 0.0:
            out.append(None)
            continue
        observed = agreement_count(mine, distilled_predictions)
        out.append(normal_cdf(observed, mu, sigma))
    return out


def ks_normality(samples) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic against a Normal fitted by the
    sample mean and standard deviation, with the asymptotic p-value.

    Parameters are estimated from the same sample, so true p-values are
    smaller than reported (the classical Lilliefors caveat); the reported
    value matches the procedure it supports, which only needs "fail to
    reject" at generous thresholds.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n < 5:
        raise BehaviorError(f"need at least 5 samples, got {n}")
    sd = x.std(ddof=1)
    if sd == 0.0:
        raise BehaviorError("zero variance sample")
    cdf = np.array([normal_cdf(v, x.mean(), sd) for v in x])
    upper = np.max(np.arange(1, n + 1) / n - cdf)
    lower = np.max(cdf - np.arange(0, n) / n)
    stat = float(max(upper, lower))
    lam = (np.sqrt(n) + 0.12 + 0.11 / np.sqrt(n)) * stat
    p = 2.0 * sum((-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam) for k in range(1, 101))
    return stat, float(min(max(p, 0.0), 1.0))


# ---------------------------------------------------------------------------
# mixing and recognition


@dataclass
class MixCurvePoint:
    method: str
    real_per_class: int
    mean_accuracy: float
    std_accuracy: float
    baseline: bool = False


def mixing_curve(
    real: Dataset,
    test: Dataset,
    synthetic_sets: dict[str, SyntheticSet],
    k_values: list[int],
    seeds: list[int],
    spec: ModelSpec,
    train_cfg: TrainConfig | None = None,
) -> list[MixCurvePoint]:
    """Accuracy of training on distilled+k-real mixtures, plus the random-real
    baseline at the matched total count per class."""
    points = []
    for method, synth in synthetic_sets.items():
        for k in k_values:
            accs = []
            for seed in seeds:
                mixed = mix(real, synth, k, seed=seed)
                cfg = _recipe(train_cfg, seed)
                traj = train(spec, init(spec, "xavier_uniform", seed=seed), mixed, cfg)
                accs.append(evaluate(spec, traj.final_params(), test).accuracy)
            points.append(MixCurvePoint(method, k, float(np.mean(accs)), float(np.std(accs))))
    ipc = {s.meta.ipc for s in synthetic_sets.values()}
    base_ipc = ipc.pop() if len(ipc) == 1 else min(s.meta.ipc for s in synthetic_sets.values())
    for k in k_values:
        accs = []
        for seed in seeds:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xB45E, seed)))
            picks = np.concatenate([
                rng.choice(real.class_indices(c), size=base_ipc + k, replace=False)
                for c in range(real.num_classes)
            ])
            cfg = _recipe(train_cfg, seed)
            traj = train(spec, init(spec, "xavier_uniform", seed=seed), real.subset(picks), cfg)
            accs.append(evaluate(spec, traj.final_params(), test).accuracy)
        points.append(MixCurvePoint("baseline", k, float(np.mean(accs)), float(np.std(accs)), True))
    return points


def _recipe(train_cfg: TrainConfig | None, seed: int) -> TrainConfig:
    base = train_cfg or TrainConfig(lr=0.01, momentum=0.9, iterations=300, batch=None,
                                    seed=seed, record_every=300)
    return replace(base, seed=seed)


def plateau_iteration(accuracies, iterations=None, tolerance: float = 0.01) -> int:
    """First iteration after which no future accuracy improves by more than
    the tolerance."""
    accs = np.asarray(accuracies, dtype=np.float64)
    iterations = list(range(len(accs))) if iterations is None else list(iterations)
    best_future = np.empty(len(accs))
    running = -np.inf
    for i in range(len(accs) - 1, -1, -1):
        best_future[i] = running  # strictly-future maximum
        running = max(running, accs[i])
    for i in range(len(accs)):
        future = best_future[i] if np.isfinite(best_future[i]) else accs[i]
        if future - accs[i] <= tolerance:
            return iterations[i]
    return iterations[-1]


@dataclass
class RecognitionResult:
    iterations: list[int]
    accuracy: dict[str, np.ndarray]
    plateau: dict[str, int]


def recognition_over_time(
    spec: ModelSpec,
    real_train: Dataset,
    eval_sets: dict[str, object],
    cfg: TrainConfig,
    tolerance: float = 0.01,
) -> RecognitionResult:
    """Train on real data and track accuracy on every eval set at each
    recorded iteration, with the plateau point per set."""
    traj = train(spec, init(spec, "xavier_uniform", seed=cfg.seed), real_train, cfg)
    accuracy: dict[str, np.ndarray] = {}
    plateau: dict[str, int] = {}
    for tag, data in eval_sets.items():
        accs = np.array([
            evaluate(spec, snap, data).accuracy for snap in traj.snapshots
        ])
        accuracy[tag] = accs
        plateau[tag] = plateau_iteration(accs, traj.iterations, tolerance)
    return RecognitionResult(list(traj.iterations), accuracy, plateau)


@dataclass
class ClipDeltaRecord:
    accuracy_unclipped: float
    accuracy_clipped: float
    clipped_fraction: float

    @property
    def delta(self) -> float:
        return self.accuracy_unclipped - self.accuracy_clipped


def clip_delta(
    spec: ModelSpec,
    test: Dataset,
    synthetic: SyntheticSet,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
) -> ClipDeltaRecord:
    """Retrain on the distilled set as-is vs clipped to [0, 1]."""
    cfg = _recipe(train_cfg, seed)
    clipped = clip_to_unit(synthetic)
    a = evaluate(spec, train(spec, init(spec, "xavier_uniform", seed=seed), synthetic, cfg)
                 .final_params(), test).accuracy
    b = evaluate(spec, train(spec, init(spec, "xavier_uniform", seed=seed), clipped, cfg)
                 .final_params(), test).accuracy
    return ClipDeltaRecord(a, b, clipped.meta.clip_fraction)


@dataclass
class LossDecompositionRow:
    iteration: int
    prediction_changes: int | None  # None for the first snapshot
    loss_correct: float | None
    loss_incorrect: float | None


def loss_increase_decomposition(
    spec: ModelSpec, traj: Trajectory, test: Dataset
) -> list[LossDecompositionRow]:
    """Split test loss by whether the final model classifies each example
    correctly, and count prediction flips between consecutive snapshots."""
    final = evaluate(spec, traj.snapshots[-1], test)
    correct = final.predictions == test.labels
    rows = []
    prev_preds = None
    for it, snap in zip(traj.iterations, traj.snapshots):
        res = evaluate(spec, snap, test)
        changes = None if prev_preds is None else int(np.sum(res.predictions != prev_preds))
        prev_preds = res.predictions
        rows.append(LossDecompositionRow(
            it,
            changes,
            float(res.losses[correct].mean()) if correct.any() else None,
            float(res.losses[~correct].mean()) if (~correct).any() else None,
        ))
    return rows


# ---------------------------------------------------------------------------
# random hyperparameter search (the adaptive-moment optimizer lives only here)


@dataclass
class Trial:
    index: int
    lr: float
    momentum: float
    weight_decay: float
    optimizer: str  # sgd_momentum | adaptive_moment
    iterations: int
    grad_clip: float  # 0.0 = off
    accuracy: float  # nan if diverged


@dataclass
class SearchResult:
    best_accuracy: dict[str, float]
    best_trial: dict[str, int]
    trials: dict[str, list[Trial]]


def _search_train(spec, images, labels, trial: Trial, seed: int) -> np.ndarray:
    theta = init(spec, "xavier_uniform", seed=seed).values
    velocity = np.zeros_like(theta)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, trial.iterations + 1):
        tt = Tensor(theta, requires_grad=True)
        loss = ad.softmax_cross_entropy(forward(spec, tt, Tensor(images)), labels)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(t - 1)
        g = ad.grad(loss, tt).data
        if trial.weight_decay:
            g = g + trial.weight_decay * theta
        if trial.grad_clip:
            norm = float(np.linalg.norm(g))
            if norm > trial.grad_clip:
                g = g * (trial.grad_clip / norm)
        if trial.optimizer == "adaptive_moment":
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            step = (m1 / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + eps)
            theta = theta - trial.lr * step
        else:
            velocity = trial.momentum * velocity + g
            theta = theta - trial.lr * velocity
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(t)
    return theta


def hyperparameter_search(
    specs: list[ModelSpec],
    synthetic: SyntheticSet,
    test: Dataset,
    trials: int,
    seed: int = 0,
) -> SearchResult:
    """Random search over optimizer hyperparameters, training on the distilled
    set and scoring on real test data. Divergent trials score NaN."""
    if trials < 1:
        raise BehaviorError("trials must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x5EA2C4, seed)))
    plans: list[Trial] = []
    for i in range(trials):
        lr = 10.0 ** rng.uniform(-4, -1)
        momentum = float(rng.uniform(0.0, 0.99))
        weight_decay = 0.0 if rng.integers(0, 2) == 0 else 10.0 ** rng.uniform(-5, -1)
        optimizer = ("sgd_momentum", "adaptive_moment")[int(rng.integers(0, 2))]
        iterations = int(rng.integers(100, 1001))
        grad_clip = (0.0, 1.0)[int(rng.integers(0, 2))]
        plans.append(Trial(i, float(lr), momentum, float(weight_decay), optimizer,
                           iterations, grad_clip, float("nan")))

    by_spec: dict[str, list[Trial]] = {}
    best_acc: dict[str, float] = {}
    best_idx: dict[str, int] = {}
    for spec in specs:
        tag = spec.canonical()
        log: list[Trial] = []
        for plan in plans:
            trial = replace(plan)
            try:
                theta = _search_train(spec, synthetic.images, synthetic.labels, trial, seed)
                trial.accuracy = evaluate(spec, theta, test).accuracy
            except (TrainingDiverged, NonFiniteError):
                trial.accuracy = float("nan")
            log.append(trial)
        finite = [t for t in log if np.isfinite(t.accuracy)]
        if not finite:
            raise BehaviorError(f"all {trials} trials diverged for {tag}")
        best = max(finite, key=lambda t: t.accuracy)
        by_spec[tag] = log
        best_acc[tag] = best.accuracy
        best_idx[tag] = best.index
    return SearchResult(best_acc, best_idx, by_spec)


# ---------------------------------------------------------------------------
# feature projection


def pca_projection(features: np.ndarray):
    """Top-2 principal component coordinates of mean-centered feature vectors.

    Returns (coordinates (n, 2), top-2 eigenvalues of the covariance).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise BehaviorError(f"need at least 3 feature vectors, got shape {x.shape}")
    if x.shape[1] < 2:
        raise BehaviorError("feature dimension must be at least 2")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    top = evecs[:, ::-1][:, :2]
    return centered @ top, evals[::-1][:2].copy()


def projected_features(
    spec: ModelSpec, params, test: Dataset, synthetic: SyntheticSet
):
    """PCA plane of test + distilled penultimate features under one model."""
    feats = np.concatenate([
        penultimate_features(spec, params, test.images),
        penultimate_features(spec, params, synthetic.images),
    ])
    coords, evals = pca_projection(feats)
    return coords[: len(test)], coords[len(test):], evals
