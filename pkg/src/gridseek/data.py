"""Datasets, the synthetic shapes generator and training configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ImageError
from .imops import INTERPOLATIONS, AugmentConfig, Image, keyed_rng, read_image, write_png

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".ppm"}


class ModelVariant(str, Enum):
    M1 = "M1"  # per-epoch random jitter ranges + JPEG
    M2 = "M2"  # fixed jitter + JPEG
    M3 = "M3"  # M2 + stronger blur + random-interpolation crops
    M4 = "M4"  # M3 + pipeline-2 projection head

    @classmethod
    def parse(cls, text: str) -> "ModelVariant":
        t = str(text).strip().upper()
        if not t.startswith("M"):
            t = "M" + t
        try:
            return cls(t)
        except ValueError:
            raise ValueError(f"unknown variant {text!r} (expected 1-4 or M1-M4)") from None

    @property
    def projection_head(self) -> bool:
        return self is ModelVariant.M4


# --------------------------------------------------------------------- config

MILD_BLUR = (0.0, 0.5)
STRONG_BLUR = (0.0, 1.5)


@dataclass
class TrainConfig:
    variant: ModelVariant = ModelVariant.M4
    epochs: int = 100
    batch_size: int = 8
    tau: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    image_size: int = 64
    crop_size: int = 32
    embedding_dim: int = 32
    repr_dim: int = 128
    fpn_channels: int = 32
    anchors_per_sample: int = 64
    split_fraction: float = 0.9
    eval_seed: int = 7919
    jitter_mode: str = "fixed"  # "random" re-draws jitter ranges every epoch
    random_hue_max: float = 0.5
    random_scale_bounds: tuple[float, float] = (0.2, 1.8)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(
        blur_sigma_range=STRONG_BLUR, interpolations=INTERPOLATIONS))

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "image_size", "crop_size", "embedding_dim",
                     "repr_dim", "fpn_channels", "anchors_per_sample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("tau", "learning_rate", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        if not 0 < self.split_fraction <= 1:
            raise ValueError("split_fraction must lie in (0, 1]")
        if self.jitter_mode not in ("fixed", "random"):
            raise ValueError("jitter_mode must be 'fixed' or 'random'")
        if self.image_size % 64:
            raise ValueError("image_size must be a multiple of 64 (five pyramid levels)")
        if self.crop_size % 16:
            raise ValueError("crop_size must be a multiple of 16")
        self.augment.validate()
        if self.augment.input_size != self.image_size:
            raise ValueError("augment input size must equal image_size")


def preset(variant) -> TrainConfig:
    """Documented defaults for one of the four model variants."""
    variant = ModelVariant.parse(variant.value if isinstance(variant, ModelVariant) else variant)
    cfg = TrainConfig(variant=variant)
    if variant is ModelVariant.M1:
        cfg.epochs = 80
        cfg.jitter_mode = "random"
    if variant in (ModelVariant.M1, ModelVariant.M2):
        cfg.augment.blur_sigma_range = MILD_BLUR
        cfg.augment.interpolations = ("bilinear",)
    return cfg


def epoch_augment_config(cfg: TrainConfig, epoch: int) -> AugmentConfig:
    """Augmentation settings in effect for ``epoch``.

    In ``random`` jitter mode the hue/saturation/value ranges are re-drawn
    from broad bounds at the start of every epoch.
    """
    aug = dataclasses.replace(cfg.augment, seed=cfg.seed * 1_000_003 + epoch)
    if cfg.jitter_mode == "random":
        rng = keyed_rng(cfg.seed, 0xC0105, epoch)
        lo, hi = cfg.random_scale_bounds
        aug.hue_delta = float(rng.uniform(0.0, cfg.random_hue_max))
        aug.sat_range = tuple(sorted(rng.uniform(lo, hi, size=2).tolist()))
        aug.val_range = tuple(sorted(rng.uniform(lo, hi, size=2).tolist()))
    return aug


# key -> (parser, formatter, target); target "aug" means AugmentConfig field
def _pair(cast):
    def parse(text):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return (cast(parts[0]), cast(parts[1]))
    return parse


def _fmt_pair(v):
    return f"{v[0]!r},{v[1]!r}"


def _interp_list(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


_KEYS = {
    "variant": (ModelVariant.parse, lambda v: v.value, "train"),
    "epochs": (int, repr, "train"),
    "batch_size": (int, repr, "train"),
    "tau": (float, repr, "train"),
    "learning_rate": (float, repr, "train"),
    "beta1": (float, repr, "train"),
    "beta2": (float, repr, "train"),
    "adam_eps": (float, repr, "train"),
    "seed": (int, repr, "train"),
    "image_size": (int, repr, "train"),
    "crop_size": (int, repr, "train"),
    "embedding_dim": (int, repr, "train"),
    "repr_dim": (int, repr, "train"),
    "fpn_channels": (int, repr, "train"),
    "anchors_per_sample": (int, repr, "train"),
    "split_fraction": (float, repr, "train"),
    "eval_seed": (int, repr, "train"),
    "jitter_mode": (str, str, "train"),
    "random_hue_max": (float, repr, "train"),
    "random_scale_bounds": (_pair(float), _fmt_pair, "train"),
    "p_crop_zoom": (float, repr, "aug"),
    "p_flip_h": (float, repr, "aug"),
    "p_flip_v": (float, repr, "aug"),
    "p_jpeg": (float, repr, "aug"),
    "hue_delta": (float, repr, "aug"),
    "sat_range": (_pair(float), _fmt_pair, "aug"),
    "val_range": (_pair(float), _fmt_pair, "aug"),
    "blur_sigma_range": (_pair(float), _fmt_pair, "aug"),
    "interpolations": (_interp_list, ",".join, "aug"),
    "jpeg_quality_range": (_pair(int), _fmt_pair, "aug"),
    "zoom_scale_range": (_pair(float), _fmt_pair, "aug"),
    "aspect_range": (_pair(float), _fmt_pair, "aug"),
}


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` starts a comment) into a TrainConfig.

    The ``variant`` key selects a preset first; every other key overrides it
    regardless of line order.  Errors carry the offending line number.
    """
    values: dict[str, tuple[object, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed line {raw.strip()!r} (expected key=value)", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = (_KEYS[key][0](value), lineno)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None

    cfg = preset(values["variant"][0]) if "variant" in values else preset(ModelVariant.M4)
    for key, (value, lineno) in values.items():
        target = cfg.augment if _KEYS[key][2] == "aug" else cfg
        setattr(target, key, value)
    cfg.augment.input_size = cfg.image_size
    cfg.augment.seed = cfg.seed
    try:
        cfg.validate()
    except ValueError as exc:
        # point at the line of the first key named in the message, if any
        line = next((ln for k, (_, ln) in values.items() if k in str(exc)), None)
        raise ConfigError(f"out-of-range value: {exc}", line) from None
    return cfg


def parse_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text)


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for key, (_, fmt, target) in _KEYS.items():
        obj = cfg.augment if target == "aug" else cfg
        lines.append(f"{key}={fmt(getattr(obj, key))}")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- dataset

@dataclass
class Dataset:
    root: Path
    items: list[tuple[str, Path]]  # (image_id, path), lexicographic by path
    split: str = "all"

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    def load(self, i: int) -> Image:
        return read_image(self.items[i][1])


def scan_images(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    paths.sort(key=lambda p: p.relative_to(root).as_posix())
    items = [(p.relative_to(root).as_posix(), p) for p in paths]
    return Dataset(root, items)


def _split_rank(seed: int, image_id: str) -> bytes:
    return hashlib.blake2b(f"{seed}:{image_id}".encode("utf-8"), digest_size=8).digest()


def split_ids(ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic split: the ``round(fraction * n)`` ids with smallest seeded hash train."""
    n_train = int(round(fraction * len(ids)))
    ranked = sorted(ids, key=lambda i: _split_rank(seed, i))
    train = set(ranked[:n_train])
    return [i for i in ids if i in train], [i for i in ids if i not in train]


def load_dataset(root, split_fraction: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    full = scan_images(root)
    decodable = []
    for image_id, path in full.items:
        try:
            read_image(path)
        except ImageError:
            continue
        decodable.append((image_id, path))
    if len(decodable) < 2:
        raise DataError(f"{root} holds fewer than 2 decodable images")
    lookup = dict(decodable)
    train_ids, eval_ids = split_ids(list(lookup), split_fraction, seed)
    return (Dataset(full.root, [(i, lookup[i]) for i in train_ids], "train"),
            Dataset(full.root, [(i, lookup[i]) for i in eval_ids], "eval"))


# ---------------------------------------------------------- synthetic shapes

SHAPE_KINDS = ("circle", "square", "triangle")


def _shape_mask(kind: str, cx: float, cy: float, size: float, n: int) -> np.ndarray:
    """Boolean mask sampled at pixel centers.

    ``size`` is the side (square), diameter (circle) or base = height
    (upright isosceles triangle).
    """
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    if kind == "circle":
        r = size / 2
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    half = size / 2
    if kind == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    top, bottom = cy - half, cy + half
    rel = (ys - top) / size  # 0 at apex, 1 at base
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= half * rel)


def shape_area(kind: str, size: float) -> float:
    if kind == "circle":
        return math.pi * size * size / 4
    if kind == "square":
        return size * size
    return size * size / 2


def _render_synthetic(index: int, size: int, seed: int) -> tuple[np.ndarray, list[dict]]:
    rng = keyed_rng(seed, 0x5A0E5, index)
    ys, xs = (np.mgrid[0:size, 0:size] + 0.5) / size
    # bilinear blend of four muted corner colors gives every location its own tint
    corners = rng.uniform(0.15, 0.85, size=(4, 3))
    wx, wy = xs[..., None], ys[..., None]
    bg = ((1 - wx) * (1 - wy) * corners[0] + wx * (1 - wy) * corners[1]
          + (1 - wx) * wy * corners[2] + wx * wy * corners[3])
    bg = bg * 0.6 + 0.2
    bg += rng.normal(0.0, 0.02, size=bg.shape)
    pixels = np.clip(bg, 0.0, 1.0)

    n_shapes = int(rng.integers(1, 4))
    base_hue = rng.random()
    occupied = np.zeros((size, size), dtype=bool)
    shapes = []
    area_total = size * size
    for s in range(n_shapes):
        for _attempt in range(50):
            kind = SHAPE_KINDS[int(rng.integers(0, 3))]
            frac = rng.uniform(0.10, 0.40)
            side = math.sqrt(frac * area_total / (shape_area(kind, 1.0)))
            side = float(round(side))
            half = side / 2
            # snap so the bounding box edges fall on pixel boundaries
            cx = float(round(rng.uniform(half, size - half) - half)) + half
            cy = float(round(rng.uniform(half, size - half) - half)) + half
            frac_real = shape_area(kind, side) / area_total
            if not 0.10 <= frac_real <= 0.40:
                continue
            mask = _shape_mask(kind, cx, cy, side, size)
            # one-pixel gap keeps shapes separable by color
            grown = mask | np.roll(mask, 1, 0) | np.roll(mask, -1, 0) | np.roll(mask, 1, 1) | np.roll(mask, -1, 1)
            if np.any(grown & occupied):
                continue
            hue = (base_hue + s / 3.0) % 1.0
            rgb = _saturated(hue)
            pixels[mask] = rgb
            occupied |= mask
            shapes.append({"kind": kind, "center": [cx, cy], "size": side,
                           "rgb": [int(round(c * 255)) for c in rgb]})
            break
    return pixels, shapes


def _saturated(hue: float) -> np.ndarray:
    from .imops import hsv_to_rgb
    rgb = hsv_to_rgb(np.array([hue, 1.0, 1.0]))
    return np.round(rgb * 255) / 255


def gen_synthetic(n_images: int, size: int, seed: int, out_dir) -> Dataset:
    """Write ``n_images`` PNGs of colored shapes plus ``manifest.json``.

    Output is a pure function of ``(n_images, size, seed)``.
    """
    if n_images < 2:
        raise DataError("need at least 2 synthetic images")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    width = len(str(n_images - 1))
    manifest = []
    for i in range(n_images):
        pixels, shapes = _render_synthetic(i, size, seed)
        image_id = f"img_{i:0{width}d}.png"
        try:
            write_png(Image(pixels), out / image_id)
        except OSError as exc:
            raise DataError(f"cannot write {out / image_id}: {exc}") from exc
        manifest.append({"image_id": image_id, "shapes": shapes})
    (out / "manifest.json").write_text(json.dumps({"size": size, "seed": seed, "images": manifest},
                                                  indent=1, sort_keys=True))
    return scan_images(out)


def load_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / "manifest.json").read_text())
