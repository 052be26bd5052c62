"""Four dataset-distillation methods, each learning a small synthetic set.

All four share the same outer shape: a synthetic pixel array with fixed labels
is repeatedly nudged by the gradient of a method-specific objective. The
pixels are deliberately never clipped to [0, 1]; out-of-range values carry
real signal for the downstream analyses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Dataset, SynthMeta, SyntheticSet
from .models import Layout, ModelSpec, forward, init
from .training import TrainConfig, Trajectory, evaluate, train

log = logging.getLogger(__name__)


class DistillError(Exception):
    pass


class DistillationDiverged(DistillError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"meta-gradient became non-finite at outer step {step}")


METHODS = ("bptt", "distribution_matching", "gradient_matching", "trajectory_matching")


@dataclass(frozen=True)
class DistillConfig:
    method: str
    ipc: int = 1
    outer_lr: float = 100.0
    outer_steps: int = 300
    init: str = "real_images"  # or "xavier"
    seed: int = 0
    # unrolled inner training (bptt, trajectory matching)
    inner_steps: int = 30
    inner_lr: float = 0.01
    inner_momentum: float = 0.0
    real_batch: int = 128
    # gradient matching
    resample_every: int = 10
    sync_steps: int = 1  # brief synthetic-data training of the carrier model
    # trajectory matching
    match_steps: int = 10  # synthetic steps N
    expert_steps: int = 20  # expert steps M
    start_range: tuple[int, int] = (0, 100)
    learn_lr: bool = False
    lr_lr: float = 1e-4
    # expert buffer
    num_experts: int = 3
    expert_stride: int = 5
    expert_iterations: int = 0  # 0 -> start_range[1] + expert_steps
    expert_batch: int = 64
    # probe logging
    probe_every: int = 0  # 0 = never

    def __post_init__(self):
        if self.method not in METHODS:
            raise DistillError(f"unknown method {self.method!r}")
        if self.ipc < 1 or self.outer_steps < 0:
            raise DistillError("ipc must be >= 1 and outer_steps >= 0")
        if self.init not in ("real_images", "xavier"):
            raise DistillError(f"unknown init mode {self.init!r}")

    def expert_run_length(self) -> int:
        return self.expert_iterations or (self.start_range[1] + self.expert_steps)


@dataclass
class LogRow:
    step: int
    objective: float
    probe_accuracy: float = float("nan")


def _rng(cfg: DistillConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(0xD157, cfg.seed, stream)))


def init_synthetic(real: Dataset, cfg: DistillConfig) -> SyntheticSet:
    """Starting pixels: seeded real images per class, or Xavier-style uniform noise."""
    _, c, h, w = real.images.shape
    labels = np.repeat(np.arange(real.num_classes), cfg.ipc)
    if cfg.init == "real_images":
        rng = _rng(cfg, 0)
        picks = [
            rng.choice(real.class_indices(k), size=cfg.ipc, replace=False)
            for k in range(real.num_classes)
        ]
        images = real.images[np.concatenate(picks)].copy()
    else:
        rng = _rng(cfg, 0)
        fan = c * h * w
        bound = np.sqrt(6.0 / (2.0 * fan))
        images = rng.uniform(-bound, bound, size=(labels.size, c, h, w))
    meta = SynthMeta(cfg.method, cfg.ipc, cfg.seed, cfg.init, 0)
    return SyntheticSet(images, labels, real.num_classes, meta)


def unrolled_train(
    spec: ModelSpec,
    theta0: np.ndarray,
    images: Tensor,
    labels: np.ndarray,
    steps: int,
    lr,
    momentum: float = 0.0,
) -> Tensor:
    """Differentiable full-batch SGD; the returned parameters carry the graph
    back to `images` (and to `lr` when it is a Tensor leaf)."""
    theta = Tensor(theta0, requires_grad=True)
    velocity = None
    for _ in range(steps):
        loss = ad.softmax_cross_entropy(forward(spec, theta, images), labels)
        g = ad.grad(loss, theta, create_graph=True)
        velocity = g if velocity is None else ad.add(ad.mul(velocity, momentum), g)
        theta = ad.sub(theta, ad.mul(velocity, lr))
    return theta


def _real_class_batch(real: Dataset, k: int, size: int, rng) -> np.ndarray:
    idx = real.class_indices(k)
    if idx.size > size:
        idx = rng.choice(idx, size=size, replace=False)
    return idx


def _probe_accuracy(spec, synthetic_images, labels, num_classes, eval_data, cfg) -> float:
    if eval_data is None:
        return float("nan")
    s = SyntheticSet(
        synthetic_images.copy(),
        np.asarray(labels),
        num_classes,
        SynthMeta(cfg.method, cfg.ipc, cfg.seed, cfg.init, -1),
    )
    acc, _ = evaluate_distilled(s, spec, eval_data, seed=cfg.seed)
    return acc


def distill(
    real: Dataset,
    cfg: DistillConfig,
    spec: ModelSpec,
    experts: list[Trajectory] | None = None,
    eval_data=None,
) -> tuple[SyntheticSet, list[LogRow]]:
    if cfg.method == "bptt":
        return distill_bptt(real, cfg, spec, eval_data)
    if cfg.method == "distribution_matching":
        return distill_distribution_matching(real, cfg, spec, eval_data)
    if cfg.method == "gradient_matching":
        return distill_gradient_matching(real, cfg, spec, eval_data)
    if experts is None:
        raise DistillError("trajectory matching needs an expert buffer")
    return distill_trajectory_matching(real, experts, cfg, spec, eval_data)


def _finish(images, base: SyntheticSet, cfg: DistillConfig) -> SyntheticSet:
    meta = replace(base.meta, iterations=cfg.outer_steps)
    return SyntheticSet(images, base.labels.copy(), base.num_classes, meta)


def distill_bptt(
    real: Dataset, cfg: DistillConfig, spec: ModelSpec, eval_data=None
) -> tuple[SyntheticSet, list[LogRow]]:
    """Bilevel distillation: unroll inner training on the synthetic set, then
    push the real-batch loss of the resulting model back onto the pixels."""
    start = init_synthetic(real, cfg)
    pixels = start.images.copy()
    labels = start.labels
    rng = _rng(cfg, 1)
    rows: list[LogRow] = []
    for step in range(cfg.outer_steps):
        model_seed = int(rng.integers(0, 2**31))
        batch_idx = rng.choice(len(real), size=min(cfg.real_batch, len(real)), replace=False)
        try:
            xs = Tensor(pixels, requires_grad=True)
            theta0 = init(spec, "xavier_uniform", seed=model_seed)
            theta = unrolled_train(
                spec, theta0.values, xs, labels, cfg.inner_steps, cfg.inner_lr, cfg.inner_momentum
            )
            outer = ad.softmax_cross_entropy(
                forward(spec, theta, Tensor(real.images[batch_idx])), real.labels[batch_idx]
            )
            meta_grad = ad.grad(outer, xs).data
            pixels = pixels - cfg.outer_lr * meta_grad
            if not np.all(np.isfinite(pixels)):
                raise NonFiniteError("pixel update")
        except NonFiniteError:
            raise DistillationDiverged(step) from None
        rows.append(LogRow(step, outer.item(), _maybe_probe(step, pixels, start, spec, eval_data, cfg)))
    return _finish(pixels, start, cfg), rows


def _maybe_probe(step, pixels, start, spec, eval_data, cfg) -> float:
    if cfg.probe_every and eval_data is not None and (step + 1) % cfg.probe_every == 0:
        return _probe_accuracy(spec, pixels, start.labels, start.num_classes, eval_data, cfg)
    return float("nan")


def mean_embedding_distance(feats_a: Tensor, feats_b: Tensor) -> Tensor:
    """Squared norm of the difference of mean feature vectors."""
    return ad.tsum(ad.square(ad.sub(ad.mean(feats_a, axis=0), ad.mean(feats_b, axis=0))))


def distill_distribution_matching(
    real: Dataset, cfg: DistillConfig, spec: ModelSpec, eval_data=None
) -> tuple[SyntheticSet, list[LogRow]]:
    """Match mean penultimate features of synthetic vs real data per class,
    under freshly initialized networks."""
    start = init_synthetic(real, cfg)
    pixels = start.images.copy()
    rng = _rng(cfg, 1)
    rows: list[LogRow] = []
    for step in range(cfg.outer_steps):
        model_seed = int(rng.integers(0, 2**31))
        embed = init(spec, "xavier_uniform", seed=model_seed)
        class_batches = [
            _real_class_batch(real, k, cfg.real_batch, rng) for k in range(real.num_classes)
        ]
        try:
            xs = Tensor(pixels, requires_grad=True)
            objective = None
            for k in range(real.num_classes):
                lo, hi = k * cfg.ipc, (k + 1) * cfg.ipc
                xk = ad.reshape(
                    ad.slice1d(ad.reshape(xs, (xs.size,)), lo * _img_size(xs), hi * _img_size(xs)),
                    (cfg.ipc,) + xs.shape[1:],
                )
                _, fs = forward(spec, embed, xk, return_features=True)
                with ad.no_grad():
                    _, fr = forward(spec, embed, Tensor(real.images[class_batches[k]]), return_features=True)
                term = mean_embedding_distance(fs, Tensor(fr.data))
                objective = term if objective is None else ad.add(objective, term)
            meta_grad = ad.grad(objective, xs).data
            pixels = pixels - cfg.outer_lr * meta_grad
            if not np.all(np.isfinite(pixels)):
                raise NonFiniteError("pixel update")
        except NonFiniteError:
            raise DistillationDiverged(step) from None
        rows.append(LogRow(step, objective.item(), _maybe_probe(step, pixels, start, spec, eval_data, cfg)))
    return _finish(pixels, start, cfg), rows


def _img_size(xs: Tensor) -> int:
    return int(np.prod(xs.shape[1:]))


def layer_cosine_distance(
    g_synth: Tensor, g_real: np.ndarray, layout: Layout
) -> tuple[Tensor | None, int]:
    """Sum over layers of (1 - cosine similarity) between flattened layer
    gradients; returns (distance, number of skipped zero-norm layers)."""
    total = None
    skipped = 0
    for name in layout.names:
        lo, hi = layout.span(name)
        gr = g_real[lo:hi]
        gs = ad.slice1d(g_synth, lo, hi)
        nr = float(np.linalg.norm(gr))
        ns = float(np.sqrt(np.sum(gs.data**2)))
        if nr < 1e-12 or ns < 1e-12:
            skipped += 1
            continue
        cos = ad.div(ad.dot(gs, Tensor(gr)), ad.mul(ad.norm(gs), nr))
        term = ad.sub(1.0, cos)
        total = term if total is None else ad.add(total, term)
    return total, skipped


def distill_gradient_matching(
    real: Dataset, cfg: DistillConfig, spec: ModelSpec, eval_data=None
) -> tuple[SyntheticSet, list[LogRow]]:
    """Match per-class model-parameter gradients of synthetic vs real batches;
    the carrier model advances on the synthetic set between outer steps."""
    start = init_synthetic(real, cfg)
    pixels = start.images.copy()
    labels = start.labels
    rng = _rng(cfg, 1)
    rows: list[LogRow] = []
    theta = None
    skipped_layers = 0
    for step in range(cfg.outer_steps):
        if theta is None or (cfg.resample_every and step % cfg.resample_every == 0):
            theta = init(spec, "xavier_uniform", seed=int(rng.integers(0, 2**31))).values
        class_batches = [
            _real_class_batch(real, k, cfg.real_batch, rng) for k in range(real.num_classes)
        ]
        try:
            xs = Tensor(pixels, requires_grad=True)
            flat = ad.reshape(xs, (xs.size,))
            objective = None
            for k in range(real.num_classes):
                lo, hi = k * cfg.ipc, (k + 1) * cfg.ipc
                xk = ad.reshape(
                    ad.slice1d(flat, lo * _img_size(xs), hi * _img_size(xs)),
                    (cfg.ipc,) + xs.shape[1:],
                )
                th = Tensor(theta, requires_grad=True)
                loss_s = ad.softmax_cross_entropy(forward(spec, th, xk), labels[lo:hi])
                g_s = ad.grad(loss_s, th, create_graph=True)
                th_r = Tensor(theta, requires_grad=True)
                bi = class_batches[k]
                loss_r = ad.softmax_cross_entropy(
                    forward(spec, th_r, Tensor(real.images[bi])), real.labels[bi]
                )
                g_r = ad.grad(loss_r, th_r).data
                term, skipped = layer_cosine_distance(g_s, g_r, Layout.for_spec(spec))
                skipped_layers += skipped
                if term is not None:
                    objective = term if objective is None else ad.add(objective, term)
            if objective is None:
                rows.append(LogRow(step, float("nan")))
                continue
            meta_grad = ad.grad(objective, xs).data
            pixels = pixels - cfg.outer_lr * meta_grad
            if not np.all(np.isfinite(pixels)):
                raise NonFiniteError("pixel update")
            # advance the carrier model with brief synthetic-data training
            for _ in range(cfg.sync_steps):
                t = Tensor(theta, requires_grad=True)
                l = ad.softmax_cross_entropy(forward(spec, t, Tensor(pixels)), labels)
                theta = theta - cfg.inner_lr * ad.grad(l, t).data
        except NonFiniteError:
            raise DistillationDiverged(step) from None
        rows.append(LogRow(step, objective.item(), _maybe_probe(step, pixels, start, spec, eval_data, cfg)))
    if skipped_layers:
        log.info("gradient matching skipped %d zero-norm layer terms", skipped_layers)
    return _finish(pixels, start, cfg), rows


def trajectory_match_loss(theta_hat: Tensor, target: np.ndarray, anchor: np.ndarray) -> Tensor:
    """Squared distance to the expert target, normalized by the expert segment length."""
    denom = float(np.sum((anchor - target) ** 2))
    if denom < 1e-12:
        raise ZeroDivisionError("degenerate expert segment")
    return ad.mul(ad.tsum(ad.square(ad.sub(theta_hat, Tensor(target)))), 1.0 / denom)


def distill_trajectory_matching(
    real: Dataset,
    experts: list[Trajectory],
    cfg: DistillConfig,
    spec: ModelSpec,
    eval_data=None,
) -> tuple[SyntheticSet, list[LogRow]]:
    """Drive short synthetic-data training segments toward expert checkpoints."""
    if not experts:
        raise DistillError("trajectory matching needs at least one expert trajectory")
    start = init_synthetic(real, cfg)
    pixels = start.images.copy()
    labels = start.labels
    rng = _rng(cfg, 1)
    stride = cfg.expert_stride
    t_lo, t_hi = cfg.start_range
    starts = [t for t in range(t_lo, t_hi + 1) if t % stride == 0]
    rows: list[LogRow] = []
    lr_value = cfg.inner_lr
    for step in range(cfg.outer_steps):
        expert = experts[int(rng.integers(0, len(experts)))]
        t = int(rng.choice(starts))
        anchor = expert.params_at(t).values
        target = expert.params_at(t + cfg.expert_steps).values
        if float(np.sum((anchor - target) ** 2)) < 1e-12:
            log.warning("skipping degenerate expert segment at t=%d (zero movement)", t)
            rows.append(LogRow(step, float("nan")))
            continue
        try:
            xs = Tensor(pixels, requires_grad=True)
            lr_leaf = Tensor(lr_value, requires_grad=True) if cfg.learn_lr else lr_value
            theta_hat = unrolled_train(
                spec, anchor, xs, labels, cfg.match_steps, lr_leaf, cfg.inner_momentum
            )
            objective = trajectory_match_loss(theta_hat, target, anchor)
            if cfg.learn_lr:
                g_x, g_lr = ad.grad(objective, [xs, lr_leaf])
                lr_value = max(1e-6, lr_value - cfg.lr_lr * g_lr.item())
            else:
                g_x = ad.grad(objective, xs)
            pixels = pixels - cfg.outer_lr * g_x.data
            if not np.all(np.isfinite(pixels)):
                raise NonFiniteError("pixel update")
        except NonFiniteError:
            raise DistillationDiverged(step) from None
        rows.append(LogRow(step, objective.item(), _maybe_probe(step, pixels, start, spec, eval_data, cfg)))
    return _finish(pixels, start, cfg), rows


def build_expert_buffer(
    real: Dataset, spec: ModelSpec, cfg: DistillConfig, num_trajectories: int | None = None
) -> list[Trajectory]:
    """Seeded real-data training runs snapshotted at the expert stride."""
    n = num_trajectories if num_trajectories is not None else cfg.num_experts
    experts = []
    for i in range(n):
        tc = TrainConfig(
            lr=0.01,
            momentum=0.9,
            iterations=cfg.expert_run_length(),
            batch=cfg.expert_batch,
            seed=cfg.seed * 1000 + i,
            record_every=cfg.expert_stride,
        )
        params0 = init(spec, "xavier_uniform", seed=tc.seed)
        experts.append(train(spec, params0, real, tc))
    return experts


# ---------------------------------------------------------------------------
# evaluation harness shared by the premise checks


def evaluate_distilled(
    s: SyntheticSet,
    spec: ModelSpec,
    test: Dataset,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[float, Trajectory]:
    """Train a fresh model on the distilled set with the standard recipe and
    report test accuracy."""
    cfg = train_cfg or TrainConfig(lr=0.01, momentum=0.9, iterations=300, batch=None,
                                   seed=seed, record_every=300)
    traj = train(spec, init(spec, "xavier_uniform", seed=seed), s, cfg)
    return evaluate(spec, traj.final_params(), test).accuracy, traj


def random_subset_baseline(
    real: Dataset,
    test: Dataset,
    spec: ModelSpec,
    per_class: int,
    seeds: range | list[int],
    train_cfg: TrainConfig | None = None,
) -> np.ndarray:
    """Accuracies from training on random real subsets of the same size as a
    distilled set; the comparison floor for every method."""
    accs = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xBA5E, seed)))
        picks = np.concatenate(
            [rng.choice(real.class_indices(k), size=per_class, replace=False)
             for k in range(real.num_classes)]
        )
        subset = real.subset(picks)
        cfg = train_cfg or TrainConfig(lr=0.01, momentum=0.9, iterations=300, batch=None,
                                       seed=seed, record_every=300)
        cfg = replace(cfg, seed=seed)
        traj = train(spec, init(spec, "xavier_uniform", seed=seed), subset, cfg)
        accs.append(evaluate(spec, traj.final_params(), test).accuracy)
    return np.asarray(accs)
