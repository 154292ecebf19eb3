import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmcdl.core import (LUMA_WEIGHTS, PatchGeometry, aggregate_patches, bicubic_upsample,
                        coverage_counts, denormalize_intensity, extract_patches, imresize,
                        normalize_intensity, patch_sums, resize_matrix, to_luminance)
from mmcdl.errors import DimensionError


def test_extract_3x3_first_patch():
    img = np.arange(1, 10, dtype=float).reshape(3, 3)
    ps = extract_patches(img, 2, 1)
    assert ps.patches.shape == (4, 4)
    np.testing.assert_array_equal(ps.patches[:, 0], [1, 2, 4, 5])
    np.testing.assert_array_equal(ps.patches[:, 3], [5, 6, 8, 9])


def test_full_image_patch_is_the_image(rng):
    img = rng.random((5, 5))
    ps = extract_patches(img, 5, 1)
    assert ps.geometry.count == 1
    np.testing.assert_array_equal(ps.patches[:, 0], img.ravel())


def test_clamped_origin_coincides_with_first():
    geom = PatchGeometry(8, 4, 8, 8)
    assert geom.patch_origins == [(0, 0)]


def test_clamped_last_origin_added():
    geom = PatchGeometry(4, 3, 9, 9)
    assert list(geom.row_origins) == [0, 3, 5]


def test_coverage_counts_examples():
    np.testing.assert_array_equal(coverage_counts(PatchGeometry(2, 1, 3, 3)),
                                  [[1, 2, 1], [2, 4, 2], [1, 2, 1]])
    assert np.all(coverage_counts(PatchGeometry(3, 1, 3, 3)) == 1)
    assert np.all(coverage_counts(PatchGeometry(2, 2, 4, 4)) == 1)


def test_geometry_rejects_oversized_patch():
    with pytest.raises(DimensionError):
        PatchGeometry(9, 1, 8, 8)
    with pytest.raises(DimensionError):
        PatchGeometry(2, 0, 8, 8)
    with pytest.raises(DimensionError):
        PatchGeometry(2, 3, 8, 8)


def test_extract_rejects_bad_images():
    with pytest.raises(DimensionError):
        extract_patches(np.zeros(5), 2)
    with pytest.raises(DimensionError):
        extract_patches(np.full((4, 4), np.nan), 2)


def test_remove_dc_round_trip(rng):
    img = rng.random((9, 7))
    ps = extract_patches(img, 3, 2, remove_dc=True)
    assert np.abs(ps.patches.mean(axis=0)).max() <= 1e-10
    np.testing.assert_allclose(aggregate_patches(ps, add_dc=True), img, atol=1e-10)


def test_two_overlapping_patches_average():
    # 2x3 image, 2x2 patches at columns 0 and 1; second patch is c higher
    geom = PatchGeometry(2, 1, 2, 3)
    c = 0.7
    P = np.stack([np.ones(4), np.ones(4) + c], axis=1)
    from mmcdl.core import PatchSet
    out = aggregate_patches(PatchSet(geom, P))
    np.testing.assert_allclose(out[:, 1], 1 + c / 2, atol=1e-15)
    np.testing.assert_allclose(out[:, 0], 1.0)
    np.testing.assert_allclose(out[:, 2], 1 + c)


def test_intensity_scaling():
    assert normalize_intensity(255) == 1.0
    assert normalize_intensity(0) == 0.0
    assert normalize_intensity(128) == 128 / 255
    assert denormalize_intensity(normalize_intensity(77)) == pytest.approx(77)


def test_luminance_weights():
    rgb = np.zeros((1, 3, 3))
    rgb[0, 0, 0] = rgb[0, 1, 1] = rgb[0, 2, 2] = 1.0
    np.testing.assert_allclose(to_luminance(rgb)[0], LUMA_WEIGHTS)


def test_resize_matrix_rows_sum_to_one():
    for n_in, n_out in [(16, 4), (4, 16), (7, 7), (10, 5)]:
        W = resize_matrix(n_in, n_out)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)


def test_identity_resize(rng):
    img = rng.random((6, 5))
    np.testing.assert_allclose(imresize(img, img.shape), img, atol=1e-14)


def test_upsample_constant():
    out = bicubic_upsample(np.full((4, 5), 0.3), 3)
    assert out.shape == (12, 15)
    np.testing.assert_allclose(out, 0.3, atol=1e-14)


geometries = st.integers(1, 6).flatmap(
    lambda p: st.tuples(st.just(p), st.integers(1, p), st.integers(0, 9), st.integers(0, 9)))


@settings(max_examples=60, deadline=None)
@given(geometries, st.integers(0, 2**32 - 1))
def test_round_trip_and_coverage(g, seed):
    p, stride, dh, dw = g
    img = np.random.default_rng(seed).random((p + dh, p + dw))
    ps = extract_patches(img, p, stride)
    assert coverage_counts(ps.geometry).min() >= 1
    assert ps.patches.shape[1] == len(ps.geometry.patch_origins)
    np.testing.assert_allclose(aggregate_patches(ps), img, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(geometries, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_aggregation_is_linear(g, a, b, seed):
    p, stride, dh, dw = g
    rng = np.random.default_rng(seed)
    geom = PatchGeometry(p, stride, p + dh, p + dw)
    from mmcdl.core import PatchSet
    P1 = rng.standard_normal((geom.n, geom.count))
    P2 = rng.standard_normal((geom.n, geom.count))
    lhs = aggregate_patches(PatchSet(geom, a * P1 + b * P2))
    rhs = a * aggregate_patches(PatchSet(geom, P1)) + b * aggregate_patches(PatchSet(geom, P2))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_patch_sums_deterministic(rng):
    img = rng.random((20, 17))
    ps = extract_patches(img, 5, 1)
    assert np.array_equal(patch_sums(ps), patch_sums(ps))
    assert PatchGeometry(5, 1, 20, 17).patch_origins == ps.geometry.patch_origins
