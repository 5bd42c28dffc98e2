import colorsys
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridseek.errors import ImageError
from gridseek.imops import (AugmentConfig, AugmentLog, CropSpec, Image, augment, crop, flip_h, flip_v,
                            gaussian_blur, hsv_jitter, jpeg_roundtrip, map_rect, plan_augment, psnr,
                            read_image, replay, resize, sample_crop, write_png, write_ppm)

MODES = ("nearest", "bilinear", "bicubic")


def disabled_config(**overrides):
    base = dict(p_crop_zoom=0.0, p_flip_h=0.0, p_flip_v=0.0, p_jpeg=0.0, hue_delta=0.0,
                sat_range=(1.0, 1.0), val_range=(1.0, 1.0), blur_sigma_range=(0.0, 0.0))
    base.update(overrides)
    return AugmentConfig(**base)


# ------------------------------------------------------------------ resize

@pytest.mark.parametrize("mode", MODES)
def test_identity_resize(random_image, mode):
    out = resize(random_image, random_image.width, random_image.height, mode)
    np.testing.assert_array_equal(out.pixels, random_image.pixels)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("size", [(1, 1), (3, 5), (7, 2), (16, 16)])
def test_constant_stays_constant(mode, size):
    img = Image(np.broadcast_to([0.2, 0.5, 0.9], (2, 2, 3)).copy())
    out = resize(img, *size, mode)
    assert (out.width, out.height) == size
    np.testing.assert_allclose(out.pixels, np.broadcast_to([0.2, 0.5, 0.9], out.pixels.shape), atol=1e-12)


def bilinear_reference(src, new_w, new_h):
    """Per-pixel bilinear with half-pixel centers and clamped borders."""
    h, w, _ = src.shape
    out = np.zeros((new_h, new_w, 3))
    for y in range(new_h):
        for x in range(new_w):
            sy = (y + 0.5) * h / new_h - 0.5
            sx = (x + 0.5) * w / new_w - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            fy, fx = sy - y0, sx - x0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy = min(max(y0 + dy, 0), h - 1)
                    xx = min(max(x0 + dx, 0), w - 1)
                    out[y, x] += wy * wx * src[yy, xx]
    return out


def test_bilinear_upscale_matches_reference():
    ramp = np.linspace(0.0, 1.0, 4)
    src = np.stack([np.add.outer(ramp, ramp) / 2, np.tile(ramp, (4, 1)), np.tile(ramp[:, None], (1, 4))], -1)
    out = resize(Image(src), 8, 8, "bilinear")
    np.testing.assert_allclose(out.pixels, bilinear_reference(src, 8, 8), atol=1e-6, rtol=0)


@pytest.mark.parametrize("mode", MODES)
def test_resize_stays_in_range(rng, mode):
    img = Image((rng.random((9, 7, 3)) > 0.5).astype(float))
    out = resize(img, 20, 13, mode)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_resize_rejects_empty_target(random_image):
    with pytest.raises(ImageError):
        resize(random_image, 0, 4)


# ----------------------------------------------------------- flips and crop

def test_flips_are_involutions(random_image):
    np.testing.assert_array_equal(flip_h(flip_h(random_image)).pixels, random_image.pixels)
    np.testing.assert_array_equal(flip_v(flip_v(random_image)).pixels, random_image.pixels)
    np.testing.assert_array_equal(flip_h(random_image).pixels[:, 0], random_image.pixels[:, -1])


def test_full_crop_is_identity(random_image):
    out = crop(random_image, CropSpec(0, 0, random_image.width, random_image.height))
    np.testing.assert_array_equal(out.pixels, random_image.pixels)


def test_crop_extracts_submatrix():
    px = np.arange(48, dtype=float).reshape(4, 4, 3) / 47
    out = crop(Image(px), CropSpec(1, 1, 2, 2))
    np.testing.assert_array_equal(out.pixels, px[1:3, 1:3])


@pytest.mark.parametrize("spec", [CropSpec(3, 0, 2, 2), CropSpec(0, 3, 1, 2), CropSpec(-1, 0, 1, 1),
                                  CropSpec(0, 0, 0, 1)])
def test_out_of_bounds_crop(spec):
    with pytest.raises(ImageError):
        crop(Image(np.zeros((4, 4, 3))), spec)


# ---------------------------------------------------------------- colour

def test_identity_jitter_round_trip(random_image):
    out = hsv_jitter(random_image, 0.0, 1.0, 1.0)
    assert np.abs(out.pixels - random_image.pixels).max() <= 1 / 255


def test_gray_ignores_hue_shift():
    gray = Image(np.full((3, 3, 3), 0.4))
    np.testing.assert_allclose(hsv_jitter(gray, 0.37, 1.0, 1.0).pixels, gray.pixels, atol=1e-12)


def hsv_reference(rgb, dh, ss, vs):
    out = np.empty_like(rgb)
    for idx in np.ndindex(rgb.shape[:2]):
        h, s, v = colorsys.rgb_to_hsv(*rgb[idx])
        h = (h + dh) % 1.0
        s = min(max(s * ss, 0.0), 1.0)
        v = min(max(v * vs, 0.0), 1.0)
        out[idx] = colorsys.hsv_to_rgb(h, s, v)
    return out


@pytest.mark.parametrize("dh,ss,vs", [(0.1, 1.2, 0.8), (-0.35, 0.5, 1.3), (0.9, 1.0, 1.0)])
def test_jitter_matches_scalar_conversion(rng, dh, ss, vs):
    px = rng.random((10, 12, 3))
    out = hsv_jitter(Image(px), dh, ss, vs)
    np.testing.assert_allclose(out.pixels, hsv_reference(px, dh, ss, vs), atol=1e-6, rtol=0)


# ------------------------------------------------------------------ codec

def test_jpeg_smooth_gradient_high_quality():
    ramp = np.linspace(0, 1, 48)
    img = Image(np.stack([np.tile(ramp, (32, 1))] * 3, -1))
    assert psnr(jpeg_roundtrip(img, 100), img) > 40


@pytest.mark.parametrize("quality", [40, 75, 100])
def test_jpeg_constant_image(rng, quality):
    for color in rng.random((50, 3)):
        img = Image(np.broadcast_to(color, (16, 20, 3)).copy())
        out = jpeg_roundtrip(img, quality)
        assert (out.width, out.height) == (20, 16)
        assert psnr(out, img) > 35


@pytest.mark.parametrize("quality", [1, 10, 30])
def test_jpeg_low_quality_keeps_constant_image_flat(quality):
    # the DC quantization step bounds accuracy here, but no spatial structure may appear
    out = jpeg_roundtrip(Image(np.broadcast_to([0.3, 0.6, 0.1], (16, 20, 3)).copy()), quality)
    assert (out.width, out.height) == (20, 16)
    assert np.ptp(out.pixels.reshape(-1, 3), axis=0).max() <= 2 / 255


@pytest.mark.parametrize("quality", [0, 101])
def test_jpeg_quality_range(random_image, quality):
    with pytest.raises(ImageError):
        jpeg_roundtrip(random_image, quality)


def test_png_and_ppm_round_trip(tmp_path, random_image):
    exact = Image.from_uint8(random_image.to_uint8())
    write_png(exact, tmp_path / "a.png")
    write_ppm(exact, tmp_path / "a.ppm")
    np.testing.assert_array_equal(read_image(tmp_path / "a.png").pixels, exact.pixels)
    np.testing.assert_array_equal(read_image(tmp_path / "a.ppm").pixels, exact.pixels)


def test_unreadable_file_is_image_error(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ImageError):
        read_image(tmp_path / "bad.png")


# ------------------------------------------------------------------- blur

def test_blur_sigma_zero_and_constant(random_image):
    np.testing.assert_array_equal(gaussian_blur(random_image, 0.0).pixels, random_image.pixels)
    const = Image(np.full((9, 9, 3), 0.25))
    np.testing.assert_allclose(gaussian_blur(const, 1.7).pixels, const.pixels, atol=1e-12)


def test_blur_impulse_response():
    px = np.zeros((15, 15, 3))
    px[7, 7] = 1.0
    out = gaussian_blur(Image(px), 1.0)
    taps = np.array([math.exp(-(i * i) / 2.0) for i in range(-3, 4)])
    taps /= taps.sum()
    expected = np.zeros((15, 15))
    expected[4:11, 4:11] = np.outer(taps, taps)
    for c in range(3):
        np.testing.assert_allclose(out.pixels[:, :, c], expected, atol=1e-6, rtol=0)


# ----------------------------------------------------------- augmentation

def test_disabled_pipeline_is_plain_resize(random_image):
    cfg = disabled_config(input_size=40)
    out, log = augment(random_image, cfg, 5)
    np.testing.assert_array_equal(out.pixels, resize(random_image, 40, 40, "bilinear").pixels)
    assert [s["op"] for s in log.steps] == ["resize"]


def test_augment_is_deterministic(random_image):
    cfg = AugmentConfig(seed=11, interpolations=MODES, blur_sigma_range=(0.0, 1.0))
    a, log_a = augment(random_image, cfg, 42)
    b, log_b = augment(random_image, cfg, 42)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert log_a.to_json() == log_b.to_json()


def test_replay_is_bit_exact(random_image):
    cfg = AugmentConfig(seed=3, interpolations=MODES, blur_sigma_range=(0.0, 1.0))
    for i in range(20):
        out, log = augment(random_image, cfg, i)
        again = replay(random_image, AugmentLog.from_json(log.to_json()))
        assert again.pixels.tobytes() == out.pixels.tobytes()


def test_augment_frequencies():
    cfg = AugmentConfig(seed=2024)
    n = 10_000
    counts = dict.fromkeys(("crop_zoom", "flip_h", "flip_v", "jpeg"), 0)
    for i in range(n):
        log = plan_augment(64, 64, cfg, i)
        for op in counts:
            counts[op] += log.applied(op)
    assert abs(counts["flip_h"] / n - 0.5) <= 0.03
    assert abs(counts["flip_v"] / n - 0.5) <= 0.03
    assert abs(counts["jpeg"] / n - 0.7) <= 0.03
    assert abs(counts["crop_zoom"] / n - 0.65) <= 0.03


def test_interpolation_drawn_from_configured_set():
    cfg = AugmentConfig(seed=1, p_crop_zoom=1.0, interpolations=("nearest", "bicubic"))
    seen = {s["interp"] for i in range(200) for s in plan_augment(80, 80, cfg, i).steps if s["op"] == "resize"}
    assert seen == {"nearest", "bicubic"}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63), st.integers(0, 10_000))
def test_augment_preserves_range(seed, index):
    rng = np.random.default_rng(seed % 1000)
    img = Image((rng.random((20, 28, 3)) > 0.5).astype(float))
    cfg = AugmentConfig(seed=seed, interpolations=MODES, sat_range=(0.2, 1.8), val_range=(0.2, 1.8),
                        hue_delta=0.5, blur_sigma_range=(0.0, 1.5), input_size=24)
    out, _ = augment(img, cfg, index)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    assert (out.width, out.height) == (24, 24)


@pytest.mark.parametrize("field,value", [("p_jpeg", 1.5), ("jpeg_quality_range", (50, 20)),
                                         ("sat_range", (0.0, 1.0)), ("interpolations", ("lanczos",))])
def test_invalid_config(field, value):
    with pytest.raises(ValueError):
        AugmentConfig(**{field: value}).validate()


def test_map_rect_tracks_marked_pixel():
    """A single bright pixel lands inside its mapped rectangle after any geometric plan."""
    cfg = AugmentConfig(seed=8, p_jpeg=0.0, hue_delta=0.0, sat_range=(1, 1), val_range=(1, 1),
                        blur_sigma_range=(0, 0), interpolations=("nearest",), input_size=64)
    hits = 0
    for i in range(100):
        px = np.zeros((64, 64, 3))
        px[20:28, 36:44] = 1.0
        out, log = augment(Image(px), cfg, i)
        x0, y0, x1, y1 = map_rect(log, (36, 20, 44, 28))
        ys, xs = np.nonzero(out.pixels[:, :, 0] > 0.5)
        if len(xs):
            hits += 1
            assert xs.min() >= math.floor(x0) and xs.max() < math.ceil(x1)
            assert ys.min() >= math.floor(y0) and ys.max() < math.ceil(y1)
    assert hits > 50


# ------------------------------------------------------------ query crops

def test_sample_crop_deterministic(random_image):
    img = Image(np.zeros((64, 64, 3)))
    assert sample_crop(img, (4, 9)) == sample_crop(img, (4, 9))


def test_sample_crop_bounds_and_area():
    img = Image(np.zeros((64, 48, 3)))
    areas = []
    for i in range(10_000):
        spec = sample_crop(img, (7, i))
        spec.validate_for(img.width, img.height)
        assert 0.25 * 48 - 0.5 <= spec.w <= 0.60 * 48 + 0.5
        assert 0.25 * 64 - 0.5 <= spec.h <= 0.60 * 64 + 0.5
        areas.append(spec.w * spec.h / (48 * 64))
    assert abs(np.mean(areas) - 0.18) <= 0.02


def test_sample_crop_rejects_small_image():
    with pytest.raises(ImageError):
        sample_crop(Image(np.zeros((15, 64, 3))), 0)
