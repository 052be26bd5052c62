"""Hessian curvature analysis: stochastic trace, spectral density, loss planes.

The Hessian is always the second derivative of a cross-entropy loss with
respect to model parameters, with the loss evaluated on a fixed dataset;
matrix-vector products come from exact double backpropagation (finite
differences of gradients are available behind a flag).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_hvp_operator
from .data import Dataset, SyntheticSet
from .models import Layout, ModelSpec, init, loss_fn_for
from .stats import moving_average
from .training import TrainConfig, Trajectory, evaluate, train


class CurvatureError(Exception):
    pass


@dataclass
class SpectralDensity:
    """Quadrature nodes (Ritz values) and weights per probe, plus the smoothed
    density they induce on a grid."""

    nodes: list[np.ndarray]  # per probe
    weights: list[np.ndarray]  # per probe, each summing to 1
    grid: np.ndarray
    density: np.ndarray
    sigma: float

    def __post_init__(self):
        for w in self.weights:
            if abs(float(w.sum()) - 1.0) > 1e-8:
                raise CurvatureError(f"quadrature weights sum to {w.sum()}, expected 1")
        if np.any(self.density < 0):
            raise CurvatureError("density must be non-negative")


@dataclass
class TraceSeries:
    tag: str
    iterations: list[int]
    raw: np.ndarray
    smoothed: np.ndarray

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.iterations, self.iterations[1:])):
            raise CurvatureError("iterations must be strictly increasing")


def rademacher(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0


def hutchinson_trace(hvp_fn, dim: int, num_probes: int, seed: int = 0):
    """Mean of v^T H v over Rademacher probes; returns (estimate, std_error)."""
    if num_probes < 1:
        raise CurvatureError("num_probes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x7ACE, seed)))
    samples = np.empty(num_probes)
    for i in range(num_probes):
        v = rademacher(rng, dim)
        samples[i] = float(v @ hvp_fn(v))
    se = float(samples.std(ddof=1) / np.sqrt(num_probes)) if num_probes > 1 else 0.0
    return float(samples.mean()), se


def lanczos_density(
    hvp_fn,
    dim: int,
    steps: int,
    num_probes: int = 8,
    seed: int = 0,
    smoothing_sigma: float | None = None,
    grid_size: int = 512,
) -> SpectralDensity:
    """Stochastic Lanczos quadrature with full reorthogonalization.

    Each probe runs a Lanczos recursion from a normalized Rademacher start;
    Ritz values of the tridiagonal matrix are the quadrature nodes, squared
    first eigenvector components the weights. The returned density is the
    probe-averaged Gaussian mixture on a uniform grid.
    """
    if steps < 2 or steps > dim:
        raise CurvatureError(f"need 2 <= steps <= dim, got steps={steps}, dim={dim}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x1A2C, seed)))
    all_nodes, all_weights = [], []
    for _ in range(num_probes):
        v = rademacher(rng, dim)
        v /= np.linalg.norm(v)
        basis = np.zeros((steps, dim))
        alphas = np.zeros(steps)
        betas = np.zeros(max(steps - 1, 0))
        basis[0] = v
        k = steps
        for j in range(steps):
            w = hvp_fn(basis[j])
            alphas[j] = float(basis[j] @ w)
            w = w - alphas[j] * basis[j]
            if j > 0:
                w = w - betas[j - 1] * basis[j - 1]
            # full reorthogonalization against every Lanczos vector so far
            w = w - basis[: j + 1].T @ (basis[: j + 1] @ w)
            if j == steps - 1:
                break
            beta = float(np.linalg.norm(w))
            if beta < 1e-12:  # invariant subspace found; truncate this probe
                k = j + 1
                break
            betas[j] = beta
            basis[j + 1] = w / beta
        tri = np.diag(alphas[:k]) + np.diag(betas[: k - 1], 1) + np.diag(betas[: k - 1], -1)
        evals, evecs = np.linalg.eigh(tri)
        all_nodes.append(evals)
        all_weights.append(evecs[0] ** 2)

    lo = min(float(n.min()) for n in all_nodes)
    hi = max(float(n.max()) for n in all_nodes)
    if smoothing_sigma is None:
        smoothing_sigma = max(0.05 * (hi - lo), 1e-6 * max(abs(hi), abs(lo), 1.0))
    grid = np.linspace(lo - 3 * smoothing_sigma, hi + 3 * smoothing_sigma, grid_size)
    density = np.zeros(grid_size)
    norm = 1.0 / (smoothing_sigma * np.sqrt(2 * np.pi))
    for nodes, weights in zip(all_nodes, all_weights):
        z = (grid[:, None] - nodes[None, :]) / smoothing_sigma
        density += (np.exp(-0.5 * z * z) * weights[None, :]).sum(axis=1) * norm
    density /= num_probes
    return SpectralDensity(all_nodes, all_weights, grid, density, smoothing_sigma)


def dataset_hvp_operator(
    spec: ModelSpec,
    values: np.ndarray,
    images: np.ndarray,
    labels: np.ndarray,
    chunk: int = 96,
    mode: str = "exact",
):
    """v -> H v for the mean cross-entropy over a dataset, assembled from
    per-chunk operators so graph memory stays bounded."""
    n = len(labels)
    ops = []
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        loss_fn = loss_fn_for(spec, images[lo:hi], labels[lo:hi], scale=(hi - lo) / n)
        ops.append(make_hvp_operator(loss_fn, values, mode=mode))

    def apply(v: np.ndarray) -> np.ndarray:
        out = ops[0](v)
        for op in ops[1:]:
            out = out + op(v)
        return out

    return apply


def _eval_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, (Dataset, SyntheticSet)):
        return data.images, data.labels
    return data


def trace_over_training(
    spec: ModelSpec,
    traj: Trajectory,
    eval_sets: dict[str, object],
    num_probes: int = 20,
    window: int = 11,
    seed: int = 0,
    iterations: list[int] | None = None,
    chunk: int = 96,
    mode: str = "exact",
) -> dict[str, TraceSeries]:
    """Hutchinson trace of each eval set's loss Hessian at every snapshot.

    The same probe vectors are reused across iterations (per eval set) so the
    series is comparable point to point.
    """
    wanted = list(traj.iterations) if iterations is None else list(iterations)
    missing = [i for i in wanted if i not in traj.iterations]
    if missing:
        raise CurvatureError(f"trajectory has no snapshots at iterations {missing}")
    dim = Layout.for_spec(spec).size
    out: dict[str, TraceSeries] = {}
    for tag_index, (tag, data) in enumerate(eval_sets.items()):
        images, labels = _eval_arrays(data)
        probe_rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x7ACE, seed, tag_index)))
        probes = [rademacher(probe_rng, dim) for _ in range(num_probes)]
        raw = np.empty(len(wanted))
        for i, it in enumerate(wanted):
            values = traj.snapshots[traj.iterations.index(it)]
            hvp_fn = dataset_hvp_operator(spec, values, images, labels, chunk=chunk, mode=mode)
            raw[i] = float(np.mean([v @ hvp_fn(v) for v in probes]))
        win = min(window, len(wanted) - (1 - len(wanted) % 2))
        win = max(1, win if win % 2 == 1 else win - 1)
        out[tag] = TraceSeries(tag, wanted, raw, moving_average(raw, win))
    return out


def landscape_plane(
    spec: ModelSpec,
    theta0: np.ndarray,
    theta_real: np.ndarray,
    theta_distilled: np.ndarray,
    datasets: dict[str, object],
    resolution: int = 11,
):
    """Losses on the plane spanned by the two training endpoints.

    delta = theta_real - theta0; eta is the distilled endpoint direction with
    its delta component removed. Grid points are evaluated at
    theta0*(1-a) + theta_real*a + b*eta_perp so the corners reproduce the
    anchor parameters exactly. Returns (a_values, b_values, {tag: grid}).
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    delta = theta_real - theta0
    eta = theta_distilled - theta0
    d2 = float(delta @ delta)
    if d2 < 1e-24:
        raise CurvatureError("degenerate plane: real-data direction has zero length")
    eta_perp = eta - (float(eta @ delta) / d2) * delta
    a_values = np.linspace(0.0, 1.0, resolution)
    b_values = np.linspace(0.0, 1.0, resolution)
    grids = {tag: np.empty((resolution, resolution)) for tag in datasets}
    for i, a in enumerate(a_values):
        for j, b in enumerate(b_values):
            theta = theta0 * (1.0 - a) + theta_real * a + b * eta_perp
            for tag, data in datasets.items():
                images, labels = _eval_arrays(data)
                grids[tag][i, j] = float(evaluate(spec, theta, (images, labels)).losses.mean())
    return a_values, b_values, grids, eta_perp


@dataclass
class DistilledCurvature:
    synthetic_trace: TraceSeries
    real_trace: TraceSeries
    peak_iteration: int
    densities: dict[tuple[str, int], SpectralDensity] = field(default_factory=dict)


def distilled_training_curvature(
    spec: ModelSpec,
    synthetic: SyntheticSet,
    real: Dataset,
    train_cfg: TrainConfig | None = None,
    iterations: int | None = None,
    stride: int = 5,
    probes_synthetic: int = 20,
    probes_real: int = 8,
    real_eval_size: int = 240,
    window: int = 11,
    lanczos_steps: int = 64,
    density_probes: int = 4,
    seed: int = 0,
    compute_densities: bool = True,
) -> DistilledCurvature:
    """Train on the distilled set and watch both curvatures: the landscape the
    model optimizes (synthetic loss) and the one that matters (real loss).

    ``iterations=0`` skips training and reports curvature at the
    initialization only. Spectral densities are computed at the start, at the
    synthetic-trace peak, and at the final iteration.
    """
    if iterations == 0:
        params0 = init(spec, "xavier_uniform", seed=seed)
        traj = Trajectory(spec, [0], [params0.values.copy()], [float("nan")], [float("nan")])
    else:
        if train_cfg is None:
            train_cfg = TrainConfig(lr=0.01, momentum=0.9, iterations=iterations or 300,
                                    batch=None, seed=seed, record_every=stride)
        traj = train(spec, init(spec, "xavier_uniform", seed=seed), synthetic, train_cfg)
    if real_eval_size >= len(real):
        real_eval = (real.images, real.labels)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xEA71, seed)))
        pick = rng.choice(len(real), size=real_eval_size, replace=False)
        real_eval = (real.images[pick], real.labels[pick])

    synth_series = trace_over_training(
        spec, traj, {"synthetic": synthetic}, num_probes=probes_synthetic,
        window=window, seed=seed,
    )["synthetic"]
    real_series = trace_over_training(
        spec, traj, {"real": real_eval}, num_probes=probes_real, window=window, seed=seed,
    )["real"]

    peak_idx = int(np.argmax(synth_series.smoothed))
    peak_iteration = synth_series.iterations[peak_idx]

    densities: dict[tuple[str, int], SpectralDensity] = {}
    if compute_densities:
        dim = Layout.for_spec(spec).size
        marks = sorted({traj.iterations[0], peak_iteration, traj.iterations[-1]})
        for it in marks:
            values = traj.snapshots[traj.iterations.index(it)]
            for tag, data in (("synthetic", synthetic), ("real", real_eval)):
                images, labels = _eval_arrays(data)
                hvp_fn = dataset_hvp_operator(spec, values, images, labels)
                densities[(tag, it)] = lanczos_density(
                    hvp_fn, dim, min(lanczos_steps, dim), num_probes=density_probes, seed=seed
                )
    return DistilledCurvature(synth_series, real_series, peak_iteration, densities)


@dataclass
class AdditionalTrainingRecord:
    tag: str
    accuracy_before: float
    accuracy_after: float

    @property
    def delta(self) -> float:
        return self.accuracy_after - self.accuracy_before


def additional_training_delta(
    spec: ModelSpec,
    real_train: Dataset,
    test: Dataset,
    continuation_sets: dict[str, object],
    pre_cfg: TrainConfig | None = None,
    post_cfg: TrainConfig | None = None,
    seed: int = 0,
) -> list[AdditionalTrainingRecord]:
    """Pretrain on real data, then continue on each candidate set and report
    the test-accuracy change. post_cfg=None means no additional training
    (a zero-change control)."""
    pre_cfg = pre_cfg or TrainConfig(lr=0.01, momentum=0.9, iterations=300, batch=64,
                                     seed=seed, record_every=300)
    pre = train(spec, init(spec, "xavier_uniform", seed=seed), real_train, pre_cfg)
    params = pre.final_params()
    before = evaluate(spec, params, test).accuracy
    records = []
    for tag, data in continuation_sets.items():
        if post_cfg is None:
            records.append(AdditionalTrainingRecord(tag, before, before))
            continue
        cont = train(spec, params.copy(), data, post_cfg)
        after = evaluate(spec, cont.final_params(), test).accuracy
        records.append(AdditionalTrainingRecord(tag, before, after))
    return records
