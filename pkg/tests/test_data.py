import numpy as np
import pytest

from distillab.data import (
    DataError,
    Dataset,
    SynthMeta,
    SyntheticSet,
    clip_to_unit,
    fraction_outside_unit,
    generate_blob_splits,
    generate_blobs,
    load_attributes,
    load_dataset,
    load_synthetic,
    mix,
    pixel_density,
    save_attributes,
    save_dataset,
    save_synthetic,
)
from distillab.models import ModelSpec, init
from distillab.training import TrainConfig, evaluate, train


def tiny_synth(images=None, ipc=1, num_classes=3):
    if images is None:
        rng = np.random.default_rng(0)
        images = rng.normal(0.5, 0.6, size=(ipc * num_classes, 3, 16, 16))
    labels = np.repeat(np.arange(num_classes), ipc)
    return SyntheticSet(images, labels, num_classes, SynthMeta("bptt", ipc, 0, "real_images", 10))


class TestGenerateBlobs:
    def test_zero_sigma_collapses_classes(self):
        ds = generate_blobs(3, 5, noise_sigma=0.0, seed=1)
        for k in range(3):
            imgs = ds.images[ds.class_indices(k)]
            assert np.all(imgs == imgs[0])

    def test_same_seeds_bitwise_identical(self):
        a = generate_blobs(4, 10, seed=7, class_geometry_seed=2)
        b = generate_blobs(4, 10, seed=7, class_geometry_seed=2)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_train_test_streams_disjoint(self):
        train_ds, test_ds = generate_blob_splits(3, 20, 20, seed=0)
        assert not np.array_equal(train_ds.images, test_ds.images)

    def test_too_small_image_rejected(self):
        with pytest.raises(DataError, match="8x8"):
            generate_blobs(2, 3, image_shape=(3, 6, 6))

    def test_attributes_emitted_per_image(self):
        ds = generate_blobs(3, 8, seed=3)
        assert set(ds.attributes) == {"tint", "quadrant"}
        assert ds.attributes["tint"].shape == (24,)
        assert set(np.unique(ds.attributes["quadrant"])) <= {0, 1, 2, 3}

    def test_linearly_separable_in_pixel_space(self):
        # multinomial logistic regression (depth-1 MLP) must exceed 95% test accuracy
        train_ds, test_ds = generate_blob_splits(3, 100, 60, seed=0)
        spec = ModelSpec(kind="mlp", depth=1, width=1, input_shape=(3, 16, 16), num_classes=3)
        cfg = TrainConfig(lr=0.05, momentum=0.9, iterations=150, batch=None, seed=0, record_every=150)
        traj = train(spec, init(spec, seed=0), train_ds, cfg)
        acc = evaluate(spec, traj.final_params(), test_ds).accuracy
        assert acc > 0.95, f"blobs not separable enough: test accuracy {acc:.3f}"


class TestClip:
    def test_identity_when_in_range(self):
        s = tiny_synth(images=np.clip(np.random.default_rng(1).normal(0.5, 0.2, (3, 3, 16, 16)), 0, 1))
        out = clip_to_unit(s)
        np.testing.assert_array_equal(out.images, s.images)
        assert out.meta.clipped and out.meta.clip_fraction == 0.0

    def test_values_clamped(self):
        imgs = np.full((3, 3, 16, 16), 0.5)
        imgs[0, 0, 0, 0] = 1.7
        imgs[1, 0, 0, 0] = -0.3
        out = clip_to_unit(tiny_synth(images=imgs))
        assert out.images[0, 0, 0, 0] == 1.0
        assert out.images[1, 0, 0, 0] == 0.0

    def test_clip_fraction_matches_direct_count(self):
        rng = np.random.default_rng(2)
        imgs = rng.normal(0.5, 0.8, size=(6, 3, 16, 16))
        s = tiny_synth(images=imgs, ipc=2)
        out = clip_to_unit(s)
        direct = np.mean((imgs < 0) | (imgs > 1))
        assert out.meta.clip_fraction == fraction_outside_unit(imgs) == direct


class TestPixelDensity:
    def test_constant_image_single_spike(self):
        grid, dens = pixel_density(np.full((2, 3, 4, 4), 0.37))
        assert abs(grid[np.argmax(dens)] - 0.37) < 1e-6

    def test_integrates_to_one(self):
        ds = generate_blobs(3, 10, seed=5)
        grid, dens = pixel_density(ds.images)
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            pixel_density(np.empty((0, 3, 4, 4)))


class TestMix:
    def test_k_zero_is_synthetic_only(self):
        real = generate_blobs(3, 10, seed=0)
        s = tiny_synth()
        out = mix(real, s, 0)
        np.testing.assert_array_equal(out.images, s.images)
        assert out.synthetic_mask.sum() == len(s)

    def test_size_counting(self):
        real = generate_blobs(3, 10, seed=0)
        s = tiny_synth(ipc=2)
        out = mix(real, s, 4)
        assert len(out) == len(s) + 4 * 3

    def test_class_histogram(self):
        real = generate_blobs(3, 10, seed=0)
        s = tiny_synth(ipc=2)
        out = mix(real, s, 5, seed=3)
        counts = np.bincount(out.labels, minlength=3)
        np.testing.assert_array_equal(counts, [7, 7, 7])  # ipc + k

    def test_k_too_large(self):
        real = generate_blobs(3, 4, seed=0)
        with pytest.raises(DataError, match="only 4 available"):
            mix(real, tiny_synth(), 5)


class TestRoundTrips:
    def test_dataset_roundtrip_bitwise(self, tmp_path):
        ds = generate_blobs(3, 7, seed=9)
        path = tmp_path / "data.ddlb"
        save_dataset(path, ds)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.split == ds.split and back.num_classes == ds.num_classes

    def test_synthetic_roundtrip_bitwise(self, tmp_path):
        s = tiny_synth(ipc=3)
        path = tmp_path / "synth.ddlb"
        save_synthetic(path, s)
        back = load_synthetic(path)
        np.testing.assert_array_equal(back.images, s.images)
        np.testing.assert_array_equal(back.labels, s.labels)
        assert back.meta == s.meta

    def test_attributes_roundtrip(self, tmp_path):
        ds = generate_blobs(3, 5, seed=4)
        path = tmp_path / "attrs.csv"
        save_attributes(path, ds)
        back = load_attributes(path, len(ds))
        for k, v in ds.attributes.items():
            np.testing.assert_array_equal(back[k], v)


class TestSyntheticInvariants:
    def test_per_class_counts_must_equal_ipc(self):
        with pytest.raises(DataError, match="ipc"):
            SyntheticSet(
                np.zeros((3, 3, 8, 8)),
                np.array([0, 0, 1]),
                2,
                SynthMeta("bptt", 1, 0, "xavier", 0),
            )

    def test_labels_immutable(self):
        s = tiny_synth()
        with pytest.raises(ValueError):
            s.labels[0] = 2
