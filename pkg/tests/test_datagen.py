import numpy as np
import pytest

from sharedlatent.datagen import (
    DatasetError,
    GlyphDatasetSpec,
    LinearGaussianSpec,
    MultimodalSample,
    PolygonViewsSpec,
    corrupt_dataset,
    corrupt_modalities,
    datasets_equal,
    linear_gaussian_posterior,
    load_dataset,
    make_glyph_dataset,
    make_linear_gaussian_dataset,
    make_polygon_views_dataset,
    persist_dataset,
    read_manifest,
    regenerate,
)


# glyphs

def test_glyphs_deterministic():
    a = make_glyph_dataset(GlyphDatasetSpec.default(3, 10, seed=7))
    b = make_glyph_dataset(GlyphDatasetSpec.default(3, 10, seed=7))
    assert datasets_equal(a, b)


def test_glyph_seed_changes_bytes():
    a = make_glyph_dataset(GlyphDatasetSpec.default(3, 10, seed=7))
    b = make_glyph_dataset(GlyphDatasetSpec.default(3, 10, seed=8))
    assert not datasets_equal(a, b)


def test_glyphs_unimodal():
    ds = make_glyph_dataset(GlyphDatasetSpec.default(1, 20, seed=0))
    assert ds.n_modalities == 1
    assert ds.presence.all()
    assert ds.modalities[0].shape == (20, 16, 16, 3)


def test_glyph_class_histogram_uniform():
    ds = make_glyph_dataset(GlyphDatasetSpec.default(3, 5000, seed=0))
    counts = np.bincount(ds.labels, minlength=10)
    expected = 5000 / 10
    assert np.all(np.abs(counts - expected) <= 0.05 * expected)


def test_glyph_pixels_in_unit_range():
    ds = make_glyph_dataset(GlyphDatasetSpec.default(3, 50, seed=2))
    for m in ds.modalities:
        assert m.dtype == np.float32
        assert m.min() >= 0.0 and m.max() <= 1.0


def test_glyph_styles_differ_across_modalities():
    spec = GlyphDatasetSpec.default(3, 5, seed=0)
    styles = spec.modalities
    assert len(set(styles)) == 3


@pytest.mark.parametrize("kwargs", [dict(n_modalities=0, n_samples=5), dict(n_modalities=2, n_samples=0)])
def test_glyph_invalid_spec(kwargs):
    with pytest.raises(DatasetError):
        make_glyph_dataset(GlyphDatasetSpec.default(seed=0, **kwargs))


def test_ground_truth_label_agreement(glyph_classifiers):
    # classifiers agree on held-out clean tuples
    from sharedlatent.metrics import joint_coherence

    held = make_glyph_dataset(GlyphDatasetSpec.default(3, 1000, seed=99))
    assert joint_coherence(held.modalities, glyph_classifiers) >= 0.99


# linear-Gaussian

def _one_dim(mats, xs):
    spec = LinearGaussianSpec(1, [np.array([[a]]) for a in mats], [1.0] * len(mats), 1)
    return linear_gaussian_posterior(spec, [np.array([[x]]) for x in xs])


def test_conjugate_single_modality():
    post = _one_dim([1.0], [0.0])
    assert post.means[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert post.covariance[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_conjugate_two_modalities():
    post = _one_dim([1.0, 1.0], [2.0, 2.0])
    assert post.means[0, 0] == pytest.approx(4 / 3, abs=1e-12)
    assert post.covariance[0, 0] == pytest.approx(1 / 3, abs=1e-12)


def test_posterior_mean_matches_least_squares():
    spec = LinearGaussianSpec.random(2, (4, 3), n_samples=200, seed=5, noise_scales=(0.5, 0.8))
    ds, post = make_linear_gaussian_dataset(spec)
    # independent oracle: stacked ridge problem, prior as d extra unit-variance rows
    rows = [np.asarray(A) / s for A, s in zip(spec.matrices, spec.noise_scales)] + [np.eye(2)]
    design = np.concatenate(rows)
    for n in range(0, 200, 37):
        target = np.concatenate([ds.modalities[i][n] / s for i, s in enumerate(spec.noise_scales)] + [np.zeros(2)])
        sol, *_ = np.linalg.lstsq(design, target, rcond=None)
        np.testing.assert_allclose(post.means[n], sol, atol=1e-8)


def test_posterior_precision_identity():
    spec = LinearGaussianSpec.random(3, (5, 4), n_samples=10, seed=1, noise_scales=(0.3, 0.9))
    _, post = make_linear_gaussian_dataset(spec)
    prec = np.eye(3) + sum(np.asarray(A).T @ np.asarray(A) / s**2 for A, s in zip(spec.matrices, spec.noise_scales))
    np.testing.assert_allclose(np.linalg.inv(post.covariance), prec, atol=1e-10)


def test_orthogonal_spec_has_diagonal_posterior():
    spec = LinearGaussianSpec.orthogonal(2, (4, 4), n_samples=10, seed=3)
    _, post = make_linear_gaussian_dataset(spec)
    assert abs(post.covariance[0, 1]) < 1e-12


def test_rank_deficient_rejected():
    spec = LinearGaussianSpec(2, [np.ones((3, 2))], [1.0], 5)
    with pytest.raises(DatasetError):
        make_linear_gaussian_dataset(spec)


def test_nonpositive_noise_rejected():
    spec = LinearGaussianSpec(1, [np.ones((2, 1))], [0.0], 5)
    with pytest.raises(DatasetError):
        make_linear_gaussian_dataset(spec)


# polygon views

def test_square_views_are_rotations():
    ds = make_polygon_views_dataset(PolygonViewsSpec(12, n_views=4, n_shape_classes=2, seed=0))
    squares = np.flatnonzero(ds.labels == 1)
    assert len(squares) > 0
    for n in squares:
        v0 = ds.modalities[0][n]
        for k in range(1, 4):
            # +90 degrees in the y-up frame is a counter-clockwise array rotation
            rotated = np.rot90(v0, k=k, axes=(0, 1))
            match = np.mean(np.all(np.isclose(rotated, ds.modalities[k][n], atol=1e-6), axis=-1))
            assert match > 0.97


def test_sixteen_views():
    ds = make_polygon_views_dataset(PolygonViewsSpec(3, n_views=16))
    assert ds.n_modalities == 16 and ds.presence.all()


def test_view_counts_share_schema():
    a = make_polygon_views_dataset(PolygonViewsSpec(4, n_views=3))
    b = make_polygon_views_dataset(PolygonViewsSpec(4, n_views=8))
    assert a.modality_shapes == [(16, 16, 3)] * 3
    assert b.modality_shapes == [(16, 16, 3)] * 8


def test_single_view_rejected():
    with pytest.raises(DatasetError):
        make_polygon_views_dataset(PolygonViewsSpec(4, n_views=1))


# corruption

def _sample(ds, n=0):
    return ds[n]


def test_corrupt_all_false_is_identity(glyphs_small):
    s = glyphs_small[0]
    out = corrupt_modalities(s, [False, False, False], "noise")
    for a, b in zip(s.modalities, out.modalities):
        assert np.array_equal(a, b)


def test_corrupt_blank_zeroes(glyphs_small):
    out = corrupt_modalities(glyphs_small[0], [True, False, True], "blank")
    assert not out.modalities[0].any() and not out.modalities[2].any()
    assert np.array_equal(out.modalities[1], glyphs_small[0].modalities[1])
    assert out.presence.all()


def test_corrupt_noise_in_range(glyphs_small):
    out = corrupt_modalities(glyphs_small[0], [True, False, False], "noise", np.random.default_rng(0))
    assert 0.0 <= out.modalities[0].min() and out.modalities[0].max() <= 1.0
    assert not np.array_equal(out.modalities[0], glyphs_small[0].modalities[0])


def test_corrupt_swap_changes_label(glyphs_small, glyph_classifiers):
    held = make_glyph_dataset(GlyphDatasetSpec.default(3, 200, seed=5))
    bad = corrupt_dataset(held, [True, False, False], "swap", seed=0)
    pred = glyph_classifiers[0].predict(bad.modalities[0])
    assert np.mean(pred != held.labels) > 0.97


def test_corrupt_all_true_rejected(glyphs_small):
    with pytest.raises(DatasetError):
        corrupt_modalities(glyphs_small[0], [True, True, True], "blank")


def test_sample_needs_present_modality():
    with pytest.raises(DatasetError):
        MultimodalSample([np.zeros(2)], 0, [False])


# persistence

def test_round_trip(tmp_path):
    ds = make_glyph_dataset(GlyphDatasetSpec.default(2, 17, seed=3))
    persist_dataset(ds, tmp_path / "d")
    assert datasets_equal(ds, load_dataset(tmp_path / "d"))


def test_round_trip_float64(tmp_path):
    ds, _ = make_linear_gaussian_dataset(LinearGaussianSpec.random(2, (3, 3), n_samples=9, seed=0))
    persist_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.modalities[0].dtype == np.float64
    assert datasets_equal(ds, back)


def test_truncated_array(tmp_path):
    ds = make_glyph_dataset(GlyphDatasetSpec.default(2, 5, seed=3))
    persist_dataset(ds, tmp_path / "d")
    f = tmp_path / "d" / "modality_1.bin"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DatasetError, match="manifest shape"):
        load_dataset(tmp_path / "d")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_manifest_regenerates(tmp_path):
    for ds in (
        make_glyph_dataset(GlyphDatasetSpec.default(3, 12, seed=21)),
        make_polygon_views_dataset(PolygonViewsSpec(6, n_views=3, seed=4)),
        make_linear_gaussian_dataset(LinearGaussianSpec.random(2, (3, 2), n_samples=7, seed=9))[0],
    ):
        persist_dataset(ds, tmp_path / "d")
        manifest = read_manifest(tmp_path / "d")
        assert "seed" in manifest["spec"]["params"]
        assert datasets_equal(regenerate(manifest["spec"]), load_dataset(tmp_path / "d"))
