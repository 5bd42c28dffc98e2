"""Unsupervised training loop for the two encoders."""

from __future__ import annotations

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .contrast import LossConfig, pyramid_loss
from .data import TrainConfig, epoch_augment_config
from .errors import NumericError
from .evalkit import EpochStats, EpochTracker, append_jsonl
from .imops import AugmentConfig, Image, augment, crop, keyed_rng, map_rect, resize, sample_crop
from .net import GridSeekModel, ModelSpec, save

log = logging.getLogger(__name__)

CROP_RETRIES = 4


def default_threads() -> int:
    env = os.environ.get("GRIDSEEK_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class TrainingSample:
    crop_input: np.ndarray  # [3, crop, crop]
    view_input: np.ndarray  # [3, S, S]
    rect: tuple[float, float, float, float]  # crop rectangle in the view frame


def make_sample(img: Image, cfg: TrainConfig, aug: AugmentConfig, epoch: int,
                image_index: int) -> Optional[TrainingSample]:
    """Crop ``x_i`` and augmented view ``x_j`` of one image.

    The crop rectangle is carried through the view's geometric transforms.
    Crops whose center falls outside the view are re-drawn a few times; if
    none survives the sample is dropped for this step.
    """
    view, alog = augment(img, aug, image_index)
    size = cfg.image_size
    dtype = nd.get_default_dtype()
    for attempt in range(CROP_RETRIES):
        spec = sample_crop(img, (cfg.seed, 0x7CA1, epoch, image_index, attempt))
        x0, y0, x1, y1 = map_rect(alog, (spec.x0, spec.y0, spec.x0 + spec.w, spec.y0 + spec.h))
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        if 0 <= cx < size and 0 <= cy < size:
            piece = resize(crop(img, spec), cfg.crop_size, cfg.crop_size, "bilinear")
            return TrainingSample(piece.to_chw(dtype), view.to_chw(dtype), (x0, y0, x1, y1))
    return None


def train(cfg: TrainConfig, images: Sequence[Image], *, metrics_path=None, out_ckpt=None,
          threads: Optional[int] = None, model: Optional[GridSeekModel] = None,
          on_epoch: Optional[Callable[[EpochStats], None]] = None) -> tuple[GridSeekModel, list[EpochStats]]:
    """Train from scratch (or continue ``model``) on in-memory images."""
    cfg.validate()
    if len(images) < 1:
        raise ValueError("no training images")
    model = model or GridSeekModel(ModelSpec.from_config(cfg), seed=cfg.seed)
    params = model.parameters()
    opt = nd.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    loss_cfg = LossConfig(cfg.tau, cfg.batch_size, cfg.anchors_per_sample)
    threads = threads or default_threads()
    if metrics_path is not None:
        Path(metrics_path).write_text("")

    history = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            aug = epoch_augment_config(cfg, epoch)
            order = keyed_rng(cfg.seed, 0x0D3, epoch).permutation(len(images))
            tracker = EpochTracker(epoch)
            for start in range(0, len(order), cfg.batch_size):
                idx = [int(i) for i in order[start:start + cfg.batch_size]]

                def build(i):
                    return make_sample(images[i], cfg, aug, epoch, i)

                samples = list(pool.map(build, idx)) if pool else [build(i) for i in idx]
                samples = [s for s in samples if s is not None]
                if not samples:
                    continue
                step_rng = keyed_rng(cfg.seed, 0xA7C, epoch, start)
                pos, neg, value = train_step(model, opt, samples, loss_cfg, step_rng)
                tracker.add(pos, neg, value)
            stats = tracker.finish()
            history.append(stats)
            if metrics_path is not None:
                append_jsonl(metrics_path, stats.to_json())
            if on_epoch:
                on_epoch(stats)
    finally:
        if pool:
            pool.shutdown()
    if out_ckpt is not None:
        save(model, out_ckpt)
    return model, history


def train_step(model: GridSeekModel, opt: nd.Adam, samples: Sequence[TrainingSample],
               loss_cfg: LossConfig, rng: np.random.Generator) -> tuple[float, float, float]:
    xi = nd.Tensor(np.stack([s.crop_input for s in samples]))
    xj = nd.Tensor(np.stack([s.view_input for s in samples]))
    opt.zero_grad()
    with nd.Tape() as tape:
        _, z_i = model.encode_crops(xi)
        levels = model.encode_images(xj)
        loss, stats = pyramid_loss(z_i, levels, [s.rect for s in samples], loss_cfg, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"loss became {value}")
    tape.backward(loss)
    opt.step()
    return (stats["pos_sum"] / stats["pos_n"], stats["neg_sum"] / max(stats["neg_n"], 1), value)


def print_stats(stats: EpochStats, stream=sys.stderr) -> None:
    print(f"epoch {stats.epoch:3d}  loss {stats.avg_loss:.4f}  pos {stats.avg_positive_sim:+.4f}  "
          f"neg {stats.avg_negative_sim:+.4f}", file=stream, flush=True)
