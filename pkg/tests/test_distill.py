import numpy as np
import pytest

from distillab import autodiff as ad
from distillab.autodiff import Tensor
from distillab.data import generate_blob_splits
from distillab.distill import (
    DistillConfig,
    DistillError,
    build_expert_buffer,
    distill,
    distill_bptt,
    init_synthetic,
    layer_cosine_distance,
    mean_embedding_distance,
    trajectory_match_loss,
    unrolled_train,
)
from distillab.models import Layout, ModelSpec, forward, init
from distillab.training import load_trajectory, save_trajectory

SPEC = ModelSpec(kind="convnet", depth=2, width=4, input_shape=(3, 8, 8), num_classes=3)
MLP = ModelSpec(kind="mlp", depth=1, width=1, input_shape=(3, 8, 8), num_classes=3)


@pytest.fixture(scope="module")
def blobs():
    return generate_blob_splits(3, 30, 15, image_shape=(3, 8, 8), seed=0)


def tiny_cfg(method, **kw):
    defaults = dict(
        method=method,
        ipc=1,
        outer_steps=3,
        outer_lr=10.0,
        seed=0,
        inner_steps=5,
        inner_lr=0.05,
        real_batch=16,
        match_steps=3,
        expert_steps=4,
        start_range=(0, 8),
        expert_stride=2,
        num_experts=2,
        expert_iterations=12,
    )
    defaults.update(kw)
    return DistillConfig(**defaults)


class TestInitSynthetic:
    def test_real_images_mode_draws_per_class(self, blobs):
        real, _ = blobs
        s = init_synthetic(real, tiny_cfg("bptt", ipc=2))
        assert len(s) == 6
        np.testing.assert_array_equal(s.labels, [0, 0, 1, 1, 2, 2])
        # every image is an actual member of its class
        for i in range(6):
            members = real.images[real.class_indices(s.labels[i])]
            assert any(np.array_equal(s.images[i], m) for m in members)

    def test_xavier_mode_bounds(self, blobs):
        real, _ = blobs
        s = init_synthetic(real, tiny_cfg("bptt", init="xavier"))
        bound = np.sqrt(6.0 / (2.0 * 3 * 8 * 8))
        assert np.all(np.abs(s.images) <= bound)

    def test_metadata(self, blobs):
        real, _ = blobs
        s = init_synthetic(real, tiny_cfg("distribution_matching", seed=9))
        assert s.meta.method == "distribution_matching"
        assert s.meta.seed == 9 and s.meta.ipc == 1


class TestObjectives:
    def test_mean_embedding_distance_unit_case(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        b = Tensor(np.array([[0.0, 0.0]]))
        assert mean_embedding_distance(a, b).item() == 1.0

    def test_mean_embedding_distance_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        fa, fb = rng.normal(size=(4, 6)), rng.normal(size=(7, 6))
        got = mean_embedding_distance(Tensor(fa), Tensor(fb)).item()
        expected = float(((fa.mean(axis=0) - fb.mean(axis=0)) ** 2).sum())
        assert abs(got - expected) < 1e-12

    def test_cosine_distance_zero_for_identical(self):
        layout = Layout.for_spec(MLP)
        g = np.random.default_rng(1).normal(size=layout.size)
        term, skipped = layer_cosine_distance(Tensor(g, requires_grad=True), g, layout)
        assert skipped == 0
        assert abs(term.item()) < 1e-12

    def test_cosine_distance_scale_invariant(self):
        layout = Layout.for_spec(MLP)
        g = np.random.default_rng(2).normal(size=layout.size)
        term, _ = layer_cosine_distance(Tensor(2.0 * g, requires_grad=True), g, layout)
        assert abs(term.item()) < 1e-12

    def test_cosine_distance_matches_hand_formula(self):
        layout = Layout.for_spec(MLP)  # two segments: head.w, head.b
        rng = np.random.default_rng(3)
        gs, gr = rng.normal(size=layout.size), rng.normal(size=layout.size)
        term, _ = layer_cosine_distance(Tensor(gs, requires_grad=True), gr, layout)
        expected = 0.0
        for name in layout.names:
            lo, hi = layout.span(name)
            a, b = gs[lo:hi], gr[lo:hi]
            expected += 1.0 - (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(term.item() - expected) < 1e-10

    def test_zero_norm_layer_skipped(self):
        layout = Layout.for_spec(MLP)
        gs = np.zeros(layout.size)
        lo, hi = layout.span("head.w")
        gs[lo:hi] = 1.0  # head.b segment stays zero
        term, skipped = layer_cosine_distance(Tensor(gs, requires_grad=True), gs + 0.0, layout)
        assert skipped == 1

    def test_trajectory_loss_at_target_is_zero(self):
        target = np.array([1.0, 2.0, 3.0])
        anchor = np.array([0.0, 0.0, 0.0])
        assert trajectory_match_loss(Tensor(target), target, anchor).item() == 0.0

    def test_trajectory_loss_no_movement_is_one(self):
        target = np.array([1.0, 2.0, 3.0])
        anchor = np.array([0.5, 0.5, 0.5])
        assert abs(trajectory_match_loss(Tensor(anchor), target, anchor).item() - 1.0) < 1e-12

    def test_trajectory_loss_matches_direct_computation(self):
        rng = np.random.default_rng(4)
        th, target, anchor = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        got = trajectory_match_loss(Tensor(th), target, anchor).item()
        expected = ((th - target) ** 2).sum() / ((anchor - target) ** 2).sum()
        assert abs(got - expected) < 1e-12

    def test_trajectory_loss_degenerate_segment(self):
        v = np.array([1.0, 2.0])
        with pytest.raises(ZeroDivisionError):
            trajectory_match_loss(Tensor(v), v, v)


class TestUnrolledTraining:
    def test_unrolled_matches_plain_sgd(self, blobs):
        real, _ = blobs
        s = init_synthetic(real, tiny_cfg("bptt"))
        theta0 = init(SPEC, seed=0).values
        out = unrolled_train(SPEC, theta0, Tensor(s.images), s.labels, 4, 0.05)

        theta = theta0.copy()
        for _ in range(4):
            t = Tensor(theta, requires_grad=True)
            loss = ad.softmax_cross_entropy(forward(SPEC, t, Tensor(s.images)), s.labels)
            theta = theta - 0.05 * ad.grad(loss, t).data
        np.testing.assert_allclose(out.data, theta, rtol=1e-12)

    def test_meta_gradient_flows_to_pixels(self, blobs):
        real, _ = blobs
        s = init_synthetic(real, tiny_cfg("bptt"))
        xs = Tensor(s.images, requires_grad=True)
        theta = unrolled_train(SPEC, init(SPEC, seed=1).values, xs, s.labels, 3, 0.05)
        outer = ad.softmax_cross_entropy(
            forward(SPEC, theta, Tensor(real.images[:12])), real.labels[:12]
        )
        g = ad.grad(outer, xs)
        assert g.shape == xs.shape
        assert np.any(g.data != 0.0)


@pytest.mark.parametrize("method", ["bptt", "distribution_matching", "gradient_matching", "trajectory_matching"])
class TestMethodContracts:
    def run(self, method, blobs, **kw):
        real, test = blobs
        cfg = tiny_cfg(method, **kw)
        experts = build_expert_buffer(real, SPEC, cfg) if method == "trajectory_matching" else None
        return distill(real, cfg, SPEC, experts=experts)

    def test_zero_outer_steps_returns_initialization(self, method, blobs):
        real, _ = blobs
        cfg = tiny_cfg(method, outer_steps=0)
        experts = build_expert_buffer(real, SPEC, cfg) if method == "trajectory_matching" else None
        out, rows = distill(real, cfg, SPEC, experts=experts)
        start = init_synthetic(real, cfg)
        np.testing.assert_array_equal(out.images, start.images)
        assert rows == []

    def test_labels_fixed(self, method, blobs):
        out, _ = self.run(method, blobs)
        cfg = tiny_cfg(method)
        np.testing.assert_array_equal(out.labels, init_synthetic(blobs[0], cfg).labels)

    def test_bitwise_reproducible(self, method, blobs):
        a, rows_a = self.run(method, blobs)
        b, rows_b = self.run(method, blobs)
        np.testing.assert_array_equal(a.images, b.images)
        assert [(r.step, r.objective) for r in rows_a] == [(r.step, r.objective) for r in rows_b]

    def test_pixels_move_and_log_is_complete(self, method, blobs):
        out, rows = self.run(method, blobs)
        start = init_synthetic(blobs[0], tiny_cfg(method))
        assert not np.array_equal(out.images, start.images)
        assert len(rows) == 3
        assert all(np.isfinite(r.objective) for r in rows)


class TestBpttDegenerate:
    def test_saturated_outer_loss_gives_tiny_meta_gradient(self):
        # when inner training already classifies the outer batch perfectly,
        # there is nothing for the meta-gradient to improve
        rng = np.random.default_rng(5)
        images = np.stack([
            np.full((3, 8, 8), -1.0) + 0.1 * rng.normal(size=(3, 8, 8)),
            np.full((3, 8, 8), 1.0) + 0.1 * rng.normal(size=(3, 8, 8)),
        ])
        labels = np.array([0, 1])
        spec = ModelSpec(kind="mlp", depth=1, width=1, input_shape=(3, 8, 8), num_classes=2)
        xs = Tensor(images, requires_grad=True)
        theta = unrolled_train(spec, init(spec, mode="zeros").values, xs, labels, 120, 1.0)
        outer = ad.softmax_cross_entropy(forward(spec, theta, xs.detach()), labels)
        g = ad.grad(outer, xs)
        assert outer.item() < 1e-4
        assert np.max(np.abs(g.data)) < 1e-3


class TestExpertBuffer:
    def test_fencepost_snapshot_count(self, blobs):
        real, _ = blobs
        cfg = tiny_cfg("trajectory_matching", expert_stride=1, expert_iterations=10, num_experts=1)
        experts = build_expert_buffer(real, SPEC, cfg)
        assert experts[0].iterations == list(range(11))

    def test_different_seeds_differ_at_first_snapshot(self, blobs):
        real, _ = blobs
        cfg = tiny_cfg("trajectory_matching", num_experts=2)
        a, b = build_expert_buffer(real, SPEC, cfg)
        assert not np.array_equal(a.snapshots[1], b.snapshots[1])

    def test_buffer_roundtrip_bitwise(self, tmp_path, blobs):
        real, _ = blobs
        cfg = tiny_cfg("trajectory_matching", num_experts=1)
        (expert,) = build_expert_buffer(real, SPEC, cfg)
        save_trajectory(tmp_path / "e0", expert)
        back = load_trajectory(tmp_path / "e0", SPEC)
        for sa, sb in zip(back.snapshots, expert.snapshots):
            np.testing.assert_array_equal(sa, sb)


class TestErrors:
    def test_unknown_method(self):
        with pytest.raises(DistillError):
            DistillConfig(method="telepathy")

    def test_trajectory_matching_requires_experts(self, blobs):
        real, _ = blobs
        with pytest.raises(DistillError, match="expert"):
            distill(real, tiny_cfg("trajectory_matching"), SPEC, experts=None)


class TestDistributionMatchingSpecifics:
    def test_exact_copy_gives_zero_objective(self):
        real, _ = generate_blob_splits(3, 2, 2, image_shape=(3, 8, 8), seed=1)
        cfg = tiny_cfg("distribution_matching", ipc=2, outer_steps=1, real_batch=2, outer_lr=0.0)
        out, rows = distill(real, cfg, SPEC)
        assert rows[0].objective < 1e-20
