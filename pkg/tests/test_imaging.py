"""Tests for the image container and augmentation pipeline."""

import numpy as np
import pytest

from egoclust.imaging import (
    AugmentPolicy,
    Image,
    adjust_brightness,
    adjust_contrast,
    adjust_hue,
    adjust_saturation,
    augment,
    color_distort,
    gaussian_blur,
    gaussian_kernel,
    horizontal_flip,
    make_views,
    random_resized_crop,
    read_image,
    resize_bilinear,
    to_grayscale,
    write_png,
)


def rand_image(rng, h=32, w=32):
    return Image(rng.random((3, h, w), dtype=np.float32))


IDENTITY = AugmentPolicy(
    out_size=(32, 32),
    crop_scale=(1.0, 1.0),
    crop_ratio=(1.0, 1.0),
    flip_prob=0.0,
    jitter_prob=0.0,
    grayscale_prob=0.0,
    blur_prob=0.0,
)


# ---------------------------------------------------------------------------
# container


def test_image_rejects_bad_shape():
    with pytest.raises(ValueError):
        Image(np.zeros((32, 32)))
    with pytest.raises(ValueError):
        Image(np.zeros((4, 8, 8), dtype=np.float32))


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        Image(np.full((3, 4, 4), 1.5, dtype=np.float32))
    with pytest.raises(ValueError):
        Image(np.full((3, 4, 4), -0.1, dtype=np.float32))


def test_image_casts_to_float32():
    img = Image(np.zeros((3, 4, 4), dtype=np.float64))
    assert img.data.dtype == np.float32


def test_hwc_round_trip(rng):
    u8 = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    img = Image.from_hwc(u8)
    assert img.height == 5 and img.width == 7
    np.testing.assert_array_equal(img.to_u8(), u8)


# ---------------------------------------------------------------------------
# crop and resize


def test_crop_identity_when_scale_and_ratio_fixed(rng):
    img = rand_image(rng)
    out = random_resized_crop(img, IDENTITY, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, img.data)


def test_crop_output_size_always_policy_size(rng):
    policy = AugmentPolicy(out_size=(16, 24))
    for seed in range(20):
        out = random_resized_crop(rand_image(rng, 40, 30), policy, np.random.default_rng(seed))
        assert out.data.shape == (3, 16, 24)


def test_crop_of_constant_image_is_constant():
    img = Image(np.full((3, 32, 32), 0.625, dtype=np.float32))
    out = random_resized_crop(img, AugmentPolicy(), np.random.default_rng(3))
    np.testing.assert_allclose(out.data, 0.625, atol=1e-6)


def test_crop_rejects_degenerate_source():
    img = Image(np.zeros((3, 1, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        random_resized_crop(img, AugmentPolicy(), np.random.default_rng(0))


def test_resize_preserves_range(rng):
    img = rand_image(rng, 17, 23)
    out = resize_bilinear(img, 64, 64)
    assert out.data.shape == (3, 64, 64)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_resize_identity_when_same_size(rng):
    img = rand_image(rng, 9, 11)
    out = resize_bilinear(img, 9, 11)
    np.testing.assert_array_equal(out.data, img.data)


def test_resize_constant_exact():
    img = Image(np.full((3, 10, 10), 0.3, dtype=np.float32))
    out = resize_bilinear(img, 27, 13)
    np.testing.assert_allclose(out.data, np.float32(0.3), atol=1e-7)


# ---------------------------------------------------------------------------
# flip


def test_flip_is_involution(rng):
    img = rand_image(rng)
    once = horizontal_flip(img, 1.0, np.random.default_rng(0))
    twice = horizontal_flip(once, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(twice.data, img.data)


def test_flip_p_zero_identity(rng):
    img = rand_image(rng)
    out = horizontal_flip(img, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, img.data)


def test_flip_reverses_columns(rng):
    img = rand_image(rng)
    out = horizontal_flip(img, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, img.data[:, :, ::-1])


# ---------------------------------------------------------------------------
# color


def test_zero_strengths_identity(rng):
    img = rand_image(rng)
    policy = AugmentPolicy(jitter_strengths=(0.0, 0.0, 0.0, 0.0), jitter_prob=1.0)
    out = color_distort(img, policy, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, img.data)


def test_brightness_doubles_quarter_gray():
    img = Image(np.full((3, 2, 2), 0.25, dtype=np.float32))
    out = adjust_brightness(img, 2.0)
    np.testing.assert_allclose(out.data, 0.5, atol=1e-7)


def test_brightness_clamps():
    img = Image(np.full((3, 2, 2), 0.9, dtype=np.float32))
    out = adjust_brightness(img, 2.0)
    np.testing.assert_allclose(out.data, 1.0)


def test_contrast_zero_collapses_to_mean(rng):
    img = rand_image(rng)
    out = adjust_contrast(img, 0.0)
    expected = (
        0.299 * img.data[0] + 0.587 * img.data[1] + 0.114 * img.data[2]
    ).mean()
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_saturation_zero_is_grayscale(rng):
    img = rand_image(rng)
    out = adjust_saturation(img, 0.0)
    np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-6)
    np.testing.assert_allclose(out.data[1], out.data[2], atol=1e-6)


def test_hue_third_turn_maps_red_to_green():
    red = Image(np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))]).astype(np.float32))
    out = adjust_hue(red, 1.0 / 3.0)
    np.testing.assert_allclose(out.data[1], 1.0, atol=1e-5)
    np.testing.assert_allclose(out.data[0], 0.0, atol=1e-5)
    np.testing.assert_allclose(out.data[2], 0.0, atol=1e-5)


def test_hue_round_trip(rng):
    img = rand_image(rng, 8, 8)
    out = adjust_hue(adjust_hue(img, 0.17), -0.17)
    np.testing.assert_allclose(out.data, img.data, atol=1e-4)


def test_hue_rejects_large_shift(rng):
    with pytest.raises(ValueError):
        adjust_hue(rand_image(rng), 0.6)


def test_color_distort_stays_in_range(rng):
    policy = AugmentPolicy(jitter_prob=1.0)
    for seed in range(30):
        out = color_distort(rand_image(rng), policy, np.random.default_rng(seed))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


# ---------------------------------------------------------------------------
# grayscale


def test_grayscale_fixes_gray_images():
    gray = np.broadcast_to(np.linspace(0, 1, 16, dtype=np.float32).reshape(4, 4), (3, 4, 4))
    img = Image(gray.copy())
    out = to_grayscale(img, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(out.data, img.data, atol=1e-7)


def test_grayscale_pure_red():
    red = Image(np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))]).astype(np.float32))
    out = to_grayscale(red, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(out.data, 0.299, atol=1e-6)


def test_grayscale_p_zero_identity(rng):
    img = rand_image(rng)
    out = to_grayscale(img, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, img.data)


# ---------------------------------------------------------------------------
# blur


def test_kernel_normalized():
    for sigma in (0.1, 0.5, 1.0, 2.0):
        k = gaussian_kernel(sigma)
        assert abs(float(k.sum()) - 1.0) < 1e-6
        assert len(k) == 2 * int(np.ceil(3 * sigma)) + 1


def test_kernel_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        gaussian_kernel(0.0)


def test_blur_constant_unchanged():
    img = Image(np.full((3, 16, 16), 0.4, dtype=np.float32))
    out = gaussian_blur(img, 1.3)
    np.testing.assert_allclose(out.data, 0.4, atol=1e-6)


def test_blur_impulse_matches_sampled_gaussian():
    # impulse response of a separable blur is the outer product of the taps,
    # which is the sampled and normalized 2-D Gaussian
    sigma = 1.0
    arr = np.zeros((3, 33, 33), dtype=np.float32)
    arr[:, 16, 16] = 1.0
    out = gaussian_blur(Image(arr), sigma)
    x = np.arange(-16, 17, dtype=np.float64)
    g1 = np.exp(-(x * x) / (2 * sigma * sigma))
    g1 /= g1.sum()
    expected = np.outer(g1, g1)
    np.testing.assert_allclose(out.data[0], expected, atol=1e-4)


def dense_blur_oracle(arr2d, sigma):
    """Direct 2-D convolution with reflect padding, all in float64."""
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k1 = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    padded = np.pad(arr2d.astype(np.float64), r, mode="reflect")
    out = np.empty_like(arr2d, dtype=np.float64)
    for i in range(arr2d.shape[0]):
        for j in range(arr2d.shape[1]):
            out[i, j] = (padded[i : i + 2 * r + 1, j : j + 2 * r + 1] * k2).sum()
    return out


@pytest.mark.parametrize("sigma", [0.4, 1.0, 1.9])
def test_blur_matches_dense_convolution(rng, sigma):
    img = rand_image(rng, 12, 15)
    out = gaussian_blur(img, sigma)
    for c in range(3):
        np.testing.assert_allclose(out.data[c], dense_blur_oracle(img.data[c], sigma), atol=1e-5)


def test_blur_reduces_variance(rng):
    img = rand_image(rng)
    out = gaussian_blur(img, 2.0)
    assert out.data.var() < img.data.var()


# ---------------------------------------------------------------------------
# full pipeline


def test_disabled_policy_views_equal_resized_source(rng):
    img = rand_image(rng, 32, 32)
    a1, a2 = make_views(img, IDENTITY, np.random.default_rng(7))
    np.testing.assert_array_equal(a1.data, img.data)
    np.testing.assert_array_equal(a2.data, img.data)


def test_views_deterministic_per_seed(rng):
    img = rand_image(rng)
    policy = AugmentPolicy(out_size=(32, 32))
    a1, a2 = make_views(img, policy, np.random.default_rng(11))
    b1, b2 = make_views(img, policy, np.random.default_rng(11))
    assert a1.data.tobytes() == b1.data.tobytes()
    assert a2.data.tobytes() == b2.data.tobytes()


def test_views_differ_under_default_policy(rng):
    img = rand_image(rng)
    policy = AugmentPolicy(out_size=(32, 32))
    differing = 0
    for seed in range(100):
        a1, a2 = make_views(img, policy, np.random.default_rng(seed))
        if not np.array_equal(a1.data, a2.data):
            differing += 1
    assert differing >= 99


def test_views_valid_images(rng):
    img = rand_image(rng, 48, 48)
    policy = AugmentPolicy(out_size=(32, 32))
    for seed in range(10):
        for view in make_views(img, policy, np.random.default_rng(seed)):
            assert view.data.shape == (3, 32, 32)
            assert view.data.min() >= 0.0 and view.data.max() <= 1.0
            assert np.isfinite(view.data).all()


def test_augment_chain_runs_each_stage(rng):
    # force every stage on and check the result is still a valid image
    policy = AugmentPolicy(
        out_size=(16, 16),
        flip_prob=1.0,
        jitter_prob=1.0,
        grayscale_prob=1.0,
        blur_prob=1.0,
    )
    out = augment(rand_image(rng), policy, np.random.default_rng(5))
    assert out.data.shape == (3, 16, 16)
    # grayscale stage forces equal channels; blur preserves that
    np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-6)


# ---------------------------------------------------------------------------
# policy validation


def test_policy_rejects_bad_probability():
    with pytest.raises(ValueError):
        AugmentPolicy(flip_prob=1.5)


def test_policy_rejects_bad_scale():
    with pytest.raises(ValueError):
        AugmentPolicy(crop_scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentPolicy(crop_scale=(0.8, 0.2))


def test_policy_rejects_bad_sigma():
    with pytest.raises(ValueError):
        AugmentPolicy(blur_sigma=(-1.0, 1.0))


def test_policy_rejects_large_hue():
    with pytest.raises(ValueError):
        AugmentPolicy(jitter_strengths=(0.8, 0.8, 0.8, 0.7))


# ---------------------------------------------------------------------------
# file I/O


def test_png_round_trip(tmp_path, rng):
    img = Image.from_hwc(rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8))
    path = tmp_path / "frame.png"
    write_png(img, path)
    back = read_image(path)
    np.testing.assert_array_equal(back.to_u8(), img.to_u8())


def test_reads_binary_ppm(tmp_path, rng):
    u8 = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    path = tmp_path / "frame.ppm"
    with open(path, "wb") as fh:
        fh.write(b"P6\n6 4\n255\n")
        fh.write(u8.tobytes())
    img = read_image(path)
    np.testing.assert_array_equal(img.to_u8(), u8)
