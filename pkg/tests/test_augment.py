"""Stochastic train-time transforms and the deterministic test-time views."""

import numpy as np
import pytest

from ctsev.augment import (
    AugConfig,
    AugSet,
    CropTooLarge,
    DefaultAugParams,
    DimensionMismatch,
    TtaView,
    apply_default,
    apply_default_params,
    apply_strong_params,
    center_crop,
    crop_stack,
    draw_default_params,
    identity_default_params,
    median_blur,
    mixup_pair,
    mixup_with_lambda,
    rotate_stack,
    tta_views,
)
from ctsev.preprocess import SliceStack


def cfg(crop=(8, 8), **kw):
    return AugConfig(crop_hw=crop, **kw)


def test_aug_set_capability_flags():
    assert not AugSet.DEFAULT.uses_strong
    assert AugSet.DEFAULT_STRONG.uses_strong and not AugSet.DEFAULT_STRONG.uses_mixup
    assert AugSet.DEFAULT_STRONG_MIXUP.uses_mixup and not AugSet.DEFAULT_STRONG_MIXUP.uses_tta
    assert AugSet.DEFAULT_STRONG_MIXUP_TTA.uses_strong
    assert AugSet.DEFAULT_STRONG_MIXUP_TTA.uses_mixup
    assert AugSet.DEFAULT_STRONG_MIXUP_TTA.uses_tta


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(median_kernel=4)
    with pytest.raises(ValueError):
        cfg(rotate_limit_deg=-1.0)
    with pytest.raises(ValueError):
        cfg(brightness=1.0)
    with pytest.raises(ValueError):
        cfg(gamma_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        cfg(mixup_alpha=0.0)
    with pytest.raises(ValueError):
        cfg(crop=(0, 8))


def test_crop_extracts_the_requested_window(make_stack):
    stack = make_stack(n=2, hw=(10, 12))
    out = crop_stack(stack, 3, 4, (5, 6))
    assert np.array_equal(out.data, stack.data[:, 3:8, 4:10])
    assert out.subject_id == stack.subject_id


def test_crop_bounds_checks(make_stack):
    stack = make_stack(hw=(10, 10))
    with pytest.raises(CropTooLarge):
        crop_stack(stack, 0, 0, (11, 4))
    with pytest.raises(CropTooLarge):
        crop_stack(stack, 7, 0, (4, 4))


def test_center_crop_centers(make_stack):
    stack = make_stack(hw=(10, 10))
    out = center_crop(stack, (4, 4))
    assert np.array_equal(out.data, stack.data[:, 3:7, 3:7])


def test_identity_params_reduce_to_center_crop(make_stack):
    stack = make_stack(hw=(12, 12))
    c = cfg()
    out = apply_default_params(stack, c, identity_default_params((12, 12), c))
    assert np.array_equal(out.data, center_crop(stack, (8, 8)).data)


def test_flip_params_mirror_before_cropping(make_stack):
    stack = make_stack(hw=(8, 8))
    c = cfg()
    params = DefaultAugParams(True, 0, 0, 1.0, 1.0, 1.0)
    out = apply_default_params(stack, c, params)
    assert np.array_equal(out.data, stack.data[:, :, ::-1])
    # flipping the flipped stack restores the original
    again = apply_default_params(SliceStack(out.data), c, params)
    assert np.array_equal(again.data, stack.data)


def test_gamma_squares_a_half_stack():
    stack = SliceStack(np.full((2, 8, 8), 0.5))
    params = DefaultAugParams(False, 0, 0, 2.0, 1.0, 1.0)
    out = apply_default_params(stack, cfg(), params)
    assert np.all(out.data == 0.25)


def test_brightness_scales_and_clips():
    stack = SliceStack(np.full((1, 8, 8), 0.5))
    bright = DefaultAugParams(False, 0, 0, 1.0, 1.2, 1.0)
    assert np.allclose(apply_default_params(stack, cfg(), bright).data, 0.6)
    blown = DefaultAugParams(False, 0, 0, 1.0, 1.9, 1.0)
    hot = SliceStack(np.full((1, 8, 8), 0.9))
    assert np.all(apply_default_params(hot, cfg(), blown).data == 1.0)


def test_contrast_preserves_the_slice_mean(make_stack):
    stack = make_stack(n=3, hw=(8, 8), seed=4)
    params = DefaultAugParams(False, 0, 0, 1.0, 1.0, 0.5)
    out = apply_default_params(stack, cfg(), params)
    assert np.allclose(out.data.mean(axis=(1, 2)), stack.data.mean(axis=(1, 2)), atol=1e-12)
    # contrast 0.5 halves every deviation from the slice mean
    mean = stack.data.mean(axis=(1, 2), keepdims=True)
    assert np.allclose(out.data, mean + 0.5 * (stack.data - mean), atol=1e-15)


def test_draw_respects_configured_ranges(make_stack):
    c = cfg(crop=(6, 6), brightness=0.2, contrast=0.1, gamma_range=(0.9, 1.1))
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = draw_default_params((10, 10), c, rng)
        assert 0 <= p.crop_top <= 4 and 0 <= p.crop_left <= 4
        assert 0.9 <= p.gamma <= 1.1
        assert 0.8 <= p.brightness_factor <= 1.2
        assert 0.9 <= p.contrast_factor <= 1.1


def test_apply_default_is_deterministic_given_the_rng(make_stack):
    stack = make_stack(hw=(12, 12))
    a = apply_default(stack, cfg(), np.random.default_rng(7))
    b = apply_default(stack, cfg(), np.random.default_rng(7))
    assert np.array_equal(a.data, b.data)
    assert a.data.shape == (4, 8, 8)


def test_rotate_zero_is_a_bit_equal_copy(make_stack):
    stack = make_stack()
    out = rotate_stack(stack, 0.0)
    assert np.array_equal(out.data, stack.data)
    assert out.data is not stack.data


def test_rotate_90_matches_rot90():
    rng = np.random.default_rng(3)
    data = rng.random((2, 7, 7))
    out = rotate_stack(SliceStack(data), 90.0)
    assert np.allclose(out.data, np.rot90(data, k=3, axes=(1, 2)), atol=1e-12)


def test_rotate_keeps_a_constant_interior():
    out = rotate_stack(SliceStack(np.ones((1, 9, 9))), 5.0)
    assert np.isclose(out.data[0, 4, 4], 1.0, atol=1e-12)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0 + 1e-12


def rotate_reference(data, angle_deg):
    """Scalar inverse-mapped bilinear rotation, zeros outside the frame."""
    n, h, w = data.shape
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    out = np.zeros_like(data)
    for i in range(h):
        for j in range(w):
            xr, yr = j - cx, i - cy
            sx = np.cos(theta) * xr + np.sin(theta) * yr + cx
            sy = -np.sin(theta) * xr + np.cos(theta) * yr + cy
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            fx, fy = sx - x0, sy - y0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    xi, yi = x0 + dx, y0 + dy
                    if 0 <= xi < w and 0 <= yi < h:
                        out[:, i, j] += data[:, yi, xi] * wx * wy
    return out


def test_rotate_matches_scalar_reference():
    rng = np.random.default_rng(11)
    data = rng.random((2, 6, 9))
    for angle in (-23.0, 5.0, 141.0):
        assert np.allclose(
            rotate_stack(SliceStack(data), angle).data,
            rotate_reference(data, angle),
            atol=1e-12,
        )


def test_median_blur_removes_isolated_spikes():
    data = np.zeros((1, 7, 7))
    data[0, 3, 3] = 1.0
    out = median_blur(SliceStack(data), kernel=3)
    assert np.all(out.data == 0.0)


def test_median_blur_keeps_constants_except_padded_corners():
    out = median_blur(SliceStack(np.ones((1, 4, 4))), kernel=3)
    # zero padding puts 5 of 9 window samples outside at the corners
    expected = np.ones((4, 4))
    for i, j in ((0, 0), (0, 3), (3, 0), (3, 3)):
        expected[i, j] = 0.0
    assert np.array_equal(out.data[0], expected)


def test_median_blur_matches_scalar_reference(make_stack):
    stack = make_stack(n=2, hw=(6, 7), seed=8)
    out = median_blur(stack, kernel=3)
    padded = np.pad(stack.data, ((0, 0), (1, 1), (1, 1)))
    for s in range(2):
        for i in range(6):
            for j in range(7):
                window = padded[s, i : i + 3, j : j + 3]
                assert out.data[s, i, j] == np.median(window)


def test_median_blur_rejects_even_kernels(make_stack):
    with pytest.raises(ValueError):
        median_blur(make_stack(), kernel=2)


def test_strong_params_apply_rotation_then_blur(make_stack):
    from ctsev.augment import StrongAugParams

    stack = make_stack(hw=(9, 9))
    c = cfg(crop=(6, 6))
    out = apply_strong_params(stack, c, StrongAugParams(angle_deg=12.0, blur=True))
    expected = median_blur(rotate_stack(stack, 12.0), c.median_kernel)
    assert np.array_equal(out.data, expected.data)
    noop = apply_strong_params(stack, c, StrongAugParams(angle_deg=None, blur=False))
    assert noop.data is stack.data


def test_mixup_endpoints_are_exact(make_stack):
    a, b = make_stack(seed=1), make_stack(seed=2)
    out, y = mixup_with_lambda(a, (1.0, 1.0), b, (0.0, 1.0), 1.0)
    assert np.array_equal(out.data, a.data) and y == (1.0, 1.0)
    out, y = mixup_with_lambda(a, (1.0, 1.0), b, (0.0, 1.0), 0.0)
    assert np.array_equal(out.data, b.data) and y == (0.0, 1.0)


def test_mixup_midpoint_softens_labels(make_stack):
    a, b = make_stack(seed=1), make_stack(seed=2)
    out, y = mixup_with_lambda(a, (1.0, 1.0), b, (0.0, 0.0), 0.5)
    assert y == (0.5, 0.5)
    assert np.allclose(out.data, 0.5 * (a.data + b.data), atol=1e-15)


def test_mixup_output_stays_between_the_inputs(make_stack):
    a, b = make_stack(seed=3), make_stack(seed=4)
    rng = np.random.default_rng(0)
    for _ in range(25):
        out, _ = mixup_pair(a, (1.0, 1.0), b, (0.0, 0.0), 0.8, rng)
        assert np.all(out.data >= np.minimum(a.data, b.data) - 1e-15)
        assert np.all(out.data <= np.maximum(a.data, b.data) + 1e-15)


def test_mixup_lambda_distribution_is_symmetric():
    """lambda ~ Beta(0.8, 0.8): recover it from ones/zeros stacks."""
    ones = SliceStack(np.ones((1, 2, 2)))
    zeros = SliceStack(np.zeros((1, 2, 2)))
    rng = np.random.default_rng(42)
    lams = [
        mixup_pair(ones, (1.0, 1.0), zeros, (0.0, 0.0), 0.8, rng)[0].data[0, 0, 0]
        for _ in range(2000)
    ]
    assert abs(float(np.mean(lams)) - 0.5) < 0.03
    assert min(lams) >= 0.0 and max(lams) <= 1.0


def test_mixup_shape_mismatch(make_stack):
    with pytest.raises(DimensionMismatch):
        mixup_with_lambda(
            make_stack(hw=(8, 8)), (0, 0), make_stack(hw=(6, 6)), (0, 0), 0.5
        )
    with pytest.raises(ValueError):
        mixup_with_lambda(make_stack(), (0, 0), make_stack(), (0, 0), 1.5)


def test_tta_views_order_and_determinism(make_stack):
    stack = make_stack(n=2, hw=(10, 12), seed=6)
    views = tta_views(stack, (6, 6))
    assert len(views) == len(TtaView)
    assert all(v.data.shape == (2, 6, 6) for v in views)
    assert np.array_equal(views[0].data, center_crop(stack, (6, 6)).data)
    assert np.array_equal(views[1].data, stack.data[:, :6, :6])
    assert np.array_equal(views[2].data, stack.data[:, :6, 6:])
    assert np.array_equal(views[3].data, stack.data[:, 4:, :6])
    assert np.array_equal(views[4].data, stack.data[:, 4:, 6:])
    assert np.array_equal(
        views[5].data, center_crop(rotate_stack(stack, -5.0), (6, 6)).data
    )
    assert np.array_equal(
        views[7].data, center_crop(rotate_stack(stack, 10.0), (6, 6)).data
    )
    again = tta_views(stack, (6, 6))
    for v, w in zip(views, again):
        assert np.array_equal(v.data, w.data)


def test_tta_views_collapse_when_crop_fills_the_stack(make_stack):
    stack = make_stack(hw=(8, 8))
    views = tta_views(stack, (8, 8))
    for v in views[:5]:
        assert np.array_equal(v.data, stack.data)


def test_tta_views_reject_oversized_crops(make_stack):
    with pytest.raises(CropTooLarge):
        tta_views(make_stack(hw=(8, 8)), (9, 9))
