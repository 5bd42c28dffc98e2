"""Images, codecs and the stochastic augmentation pipeline.

Images are float RGB rasters in [0, 1] stored as ``(height, width, 3)``
arrays.  All randomness comes from a counter-based generator (Philox) keyed
by ``(seed, sample_index)``, so every augmentation is a pure function of its
inputs and can be replayed from its log.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ImageError

INTERPOLATIONS = ("nearest", "bilinear", "bicubic")
MIN_CROP = 16


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # (height, width, 3) float64 in [0, 1]

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ImageError(f"expected an (H, W, 3) raster, got shape {p.shape}")
        if p.dtype != np.float64:
            object.__setattr__(self, "pixels", p.astype(np.float64))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def validate(self) -> None:
        p = self.pixels
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ImageError("pixel values outside [0, 1]")

    def to_chw(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=dtype)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Image":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)


@dataclass(frozen=True)
class CropSpec:
    x0: int
    y0: int
    w: int
    h: int
    source_id: str = ""

    def validate_for(self, width: int, height: int) -> None:
        if self.x0 < 0 or self.y0 < 0 or self.w < 1 or self.h < 1:
            raise ImageError(f"invalid crop {self}")
        if self.x0 + self.w > width or self.y0 + self.h > height:
            raise ImageError(f"crop {self} exceeds {width}x{height} image")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)


@dataclass
class AugmentConfig:
    p_crop_zoom: float = 0.65
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    p_jpeg: float = 0.7
    hue_delta: float = 0.1
    sat_range: tuple[float, float] = (0.7, 1.3)
    val_range: tuple[float, float] = (0.7, 1.3)
    blur_sigma_range: tuple[float, float] = (0.0, 0.5)
    interpolations: tuple[str, ...] = ("bilinear",)
    jpeg_quality_range: tuple[int, int] = (30, 90)
    zoom_scale_range: tuple[float, float] = (0.6, 1.0)
    aspect_range: tuple[float, float] = (0.8, 1.25)
    input_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_crop_zoom", "p_flip_h", "p_flip_v", "p_jpeg"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        q_lo, q_hi = self.jpeg_quality_range
        if not 1 <= q_lo <= q_hi <= 100:
            raise ValueError(f"bad jpeg_quality_range {self.jpeg_quality_range}")
        for name in ("sat_range", "val_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name}={getattr(self, name)} must be positive and ordered")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad blur_sigma_range {self.blur_sigma_range}")
        if self.hue_delta < 0:
            raise ValueError("hue_delta must be non-negative")
        if not self.interpolations or any(m not in INTERPOLATIONS for m in self.interpolations):
            raise ValueError(f"interpolations must be drawn from {INTERPOLATIONS}")
        zlo, zhi = self.zoom_scale_range
        if not 0 < zlo <= zhi <= 1:
            raise ValueError(f"bad zoom_scale_range {self.zoom_scale_range}")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based generator for a tuple of non-negative integer keys."""
    words = [int(k) & 0xFFFFFFFFFFFFFFFF for k in key]
    if len(words) == 1:
        words.append(0)
    if len(words) > 2:
        folded = np.random.SeedSequence(words[1:]).generate_state(1, dtype=np.uint64)[0]
        words = [words[0], int(folded)]
    return np.random.Generator(np.random.Philox(key=np.array(words, dtype=np.uint64)))


# ---------------------------------------------------------------- resampling

def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(t <= 1, (a + 2) * t3 - (a + 3) * t2 + 1,
                    np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0))


def _resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """(n_out, n_in) weights with half-pixel centers and edge clamping."""
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(n_out) + 0.5) * n_in / n_out), 0, n_in - 1).astype(int)
        mat[rows, idx] = 1.0
    elif mode == "bilinear":
        lo = np.floor(centers)
        frac = centers - lo
        for off, w in ((0, 1 - frac), (1, frac)):
            idx = np.clip(lo + off, 0, n_in - 1).astype(int)
            np.add.at(mat, (rows, idx), w)
    elif mode == "bicubic":
        lo = np.floor(centers)
        frac = centers - lo
        for off in (-1, 0, 1, 2):
            idx = np.clip(lo + off, 0, n_in - 1).astype(int)
            np.add.at(mat, (rows, idx), _cubic(frac - off))
    else:
        raise ValueError(f"unknown interpolation {mode!r}")
    return mat


def resize(img: Image, new_w: int, new_h: int, mode: str = "bilinear") -> Image:
    if new_w < 1 or new_h < 1:
        raise ImageError(f"resize target {new_w}x{new_h} must be at least 1x1")
    if (new_w, new_h) == (img.width, img.height):
        return Image(img.pixels.copy())
    ry = _resample_matrix(img.height, new_h, mode)
    rx = _resample_matrix(img.width, new_w, mode)
    out = np.einsum("yh,hwc,xw->yxc", ry, img.pixels, rx, optimize=True)
    return Image(np.clip(out, 0.0, 1.0))


def flip_h(img: Image) -> Image:
    return Image(img.pixels[:, ::-1].copy())


def flip_v(img: Image) -> Image:
    return Image(img.pixels[::-1].copy())


def crop(img: Image, spec: CropSpec) -> Image:
    spec.validate_for(img.width, img.height)
    return Image(img.pixels[spec.y0:spec.y0 + spec.h, spec.x0:spec.x0 + spec.w].copy())


# ----------------------------------------------------------------------- color

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def hsv_jitter(img: Image, hue_delta: float, sat_scale: float, val_scale: float) -> Image:
    if sat_scale <= 0 or val_scale <= 0:
        raise ImageError("saturation and value scales must be positive")
    hsv = rgb_to_hsv(img.pixels)
    hsv[..., 0] = (hsv[..., 0] + hue_delta) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val_scale, 0.0, 1.0)
    return Image(np.clip(hsv_to_rgb(hsv), 0.0, 1.0))


# ---------------------------------------------------------------------- codecs

def jpeg_roundtrip(img: Image, quality: int) -> Image:
    if not 1 <= int(quality) <= 100:
        raise ImageError(f"JPEG quality {quality} outside [1, 100]")
    buf = io.BytesIO()
    try:
        PILImage.fromarray(img.to_uint8(), "RGB").save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        decoded = np.asarray(PILImage.open(buf).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ImageError(f"JPEG codec failure: {exc}") from exc
    return Image.from_uint8(decoded)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur with clamped edges; ``sigma == 0`` is identity."""
    if sigma < 0:
        raise ImageError("sigma must be non-negative")
    if sigma == 0:
        return Image(img.pixels.copy())
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    p = img.pixels
    H, W = p.shape[:2]
    rows = np.clip(np.arange(-r, H + r), 0, H - 1)
    padded = p[rows]
    tmp = sum(k[i] * padded[i:i + H] for i in range(len(k)))
    cols = np.clip(np.arange(-r, W + r), 0, W - 1)
    padded = tmp[:, cols]
    out = sum(k[i] * padded[:, i:i + W] for i in range(len(k)))
    return Image(np.clip(out, 0.0, 1.0))


def read_image(path) -> Image:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot decode {path}: {exc}") from exc
    return Image.from_uint8(arr)


def write_png(img: Image, path) -> None:
    # fixed encoder settings so identical pixels give identical bytes
    PILImage.fromarray(img.to_uint8(), "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def write_ppm(img: Image, path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.to_uint8().tobytes())


def png_bytes(img: Image) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(img.to_uint8(), "RGB").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentLog:
    """Ordered transforms applied to one sample, with their parameters."""

    source_size: tuple[int, int]  # (width, height)
    steps: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"source_size": list(self.source_size), "steps": self.steps},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentLog":
        obj = json.loads(text)
        return cls(tuple(obj["source_size"]), obj["steps"])

    def applied(self, op: str) -> bool:
        return any(s["op"] == op for s in self.steps)


def apply_step(img: Image, step: dict) -> Image:
    op = step["op"]
    if op == "crop_zoom":
        return crop(img, CropSpec(step["x0"], step["y0"], step["w"], step["h"]))
    if op == "resize":
        return resize(img, step["w"], step["h"], step["interp"])
    if op == "flip_h":
        return flip_h(img)
    if op == "flip_v":
        return flip_v(img)
    if op == "jpeg":
        return jpeg_roundtrip(img, step["quality"])
    if op == "hsv_jitter":
        return hsv_jitter(img, step["hue_delta"], step["sat_scale"], step["val_scale"])
    if op == "gaussian_blur":
        return gaussian_blur(img, step["sigma"])
    raise ValueError(f"unknown augmentation step {op!r}")


def replay(img: Image, log: AugmentLog) -> Image:
    for step in log.steps:
        img = apply_step(img, step)
    return img


def plan_augment(width: int, height: int, cfg: AugmentConfig, sample_index: int) -> AugmentLog:
    """Draw every random decision for one sample without touching pixels.

    Order: crop/zoom (window aspect distorted), resize to input size, flips,
    JPEG, HSV jitter, blur.  The random stream is consumed identically
    whether or not a branch fires so decisions are independent of each other.
    """
    rng = keyed_rng(cfg.seed, sample_index)
    u = rng.random(4)
    zoom_draw = rng.random(4)
    interp_draw = rng.integers(0, len(cfg.interpolations))
    quality = int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1))
    hue = float(rng.uniform(-cfg.hue_delta, cfg.hue_delta)) if cfg.hue_delta > 0 else 0.0
    sat = float(rng.uniform(*cfg.sat_range))
    val = float(rng.uniform(*cfg.val_range))
    sigma = float(rng.uniform(*cfg.blur_sigma_range))

    log = AugmentLog((width, height))
    size = cfg.input_size
    if u[0] < cfg.p_crop_zoom:
        zlo, zhi = cfg.zoom_scale_range
        alo, ahi = cfg.aspect_range
        scale = zlo + (zhi - zlo) * zoom_draw[0]
        aspect = math.exp(math.log(alo) + (math.log(ahi) - math.log(alo)) * zoom_draw[1])
        w = int(np.clip(round(width * scale * math.sqrt(aspect)), 1, width))
        h = int(np.clip(round(height * scale / math.sqrt(aspect)), 1, height))
        x0 = int(zoom_draw[2] * (width - w + 1))
        y0 = int(zoom_draw[3] * (height - h + 1))
        log.steps.append({"op": "crop_zoom", "x0": x0, "y0": y0, "w": w, "h": h})
        interp = cfg.interpolations[int(interp_draw)]
        if (w, h) != (size, size):
            log.steps.append({"op": "resize", "w": size, "h": size, "interp": interp})
    elif (width, height) != (size, size):
        log.steps.append({"op": "resize", "w": size, "h": size, "interp": "bilinear"})
    if u[1] < cfg.p_flip_h:
        log.steps.append({"op": "flip_h"})
    if u[2] < cfg.p_flip_v:
        log.steps.append({"op": "flip_v"})
    if u[3] < cfg.p_jpeg:
        log.steps.append({"op": "jpeg", "quality": quality})
    if hue != 0.0 or sat != 1.0 or val != 1.0:
        log.steps.append({"op": "hsv_jitter", "hue_delta": hue, "sat_scale": sat, "val_scale": val})
    if sigma > 0.0:
        log.steps.append({"op": "gaussian_blur", "sigma": sigma})
    return log


def augment(img: Image, cfg: AugmentConfig, sample_index: int) -> tuple[Image, AugmentLog]:
    """Produce the augmented full view and the log of what was applied."""
    log = plan_augment(img.width, img.height, cfg, sample_index)
    return replay(img, log), log


def map_rect(log: AugmentLog, rect: Sequence[float]) -> tuple[float, float, float, float]:
    """Carry an ``(x0, y0, x1, y1)`` source rectangle through the geometric steps."""
    x0, y0, x1, y1 = map(float, rect)
    w, h = log.source_size
    for step in log.steps:
        op = step["op"]
        if op == "crop_zoom":
            x0, x1 = x0 - step["x0"], x1 - step["x0"]
            y0, y1 = y0 - step["y0"], y1 - step["y0"]
            w, h = step["w"], step["h"]
        elif op == "resize":
            sx, sy = step["w"] / w, step["h"] / h
            x0, x1, y0, y1 = x0 * sx, x1 * sx, y0 * sy, y1 * sy
            w, h = step["w"], step["h"]
        elif op == "flip_h":
            x0, x1 = w - x1, w - x0
        elif op == "flip_v":
            y0, y1 = h - y1, h - y0
    return x0, y0, x1, y1


def sample_crop(img: Image, rng_key, source_id: str = "",
                side_range: tuple[float, float] = (0.25, 0.60)) -> CropSpec:
    """Random query crop: side lengths uniform over a fraction of each dimension."""
    if img.width < MIN_CROP or img.height < MIN_CROP:
        raise ImageError(f"image {img.width}x{img.height} smaller than minimum crop side {MIN_CROP}")
    key = rng_key if isinstance(rng_key, tuple) else (rng_key,)
    rng = keyed_rng(*key)
    fw, fh, px, py = rng.random(4)
    lo, hi = side_range
    w = int(np.clip(round((lo + (hi - lo) * fw) * img.width), 1, img.width))
    h = int(np.clip(round((lo + (hi - lo) * fh) * img.height), 1, img.height))
    x0 = int(px * (img.width - w + 1))
    y0 = int(py * (img.height - h + 1))
    return CropSpec(x0, y0, w, h, source_id)


def psnr(a: Image, b: Image) -> float:
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)
