"""Evaluation: similarity-grid accuracy, top-k retrieval and epoch curves.

Similarity Grid Accuracy (SGA) at a pyramid level is the fraction of
(image, crop) samples for which the cell most similar to the crop embedding
has its center inside the crop rectangle.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .contrast import crop_rect, inside_mask
from .imops import CropSpec, Image, crop, resize, sample_crop
from .net import N_LEVELS, GridSeekModel, PyramidEmbeddings, grid_shape, level_stride, prepare_image

DEFAULT_KS = (1, 5, 10)


@dataclass
class SgaResult:
    per_level: list[float]
    n_samples: int

    def to_json(self) -> str:
        return json.dumps({"per_level": self.per_level, "n_samples": self.n_samples})


@dataclass
class EpochStats:
    epoch: int
    avg_positive_sim: float
    avg_negative_sim: float
    avg_loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TopKResult:
    k_values: list[int]
    accuracy: dict[int, float]
    n_queries: int = 0

    def to_json(self) -> str:
        return json.dumps({"k_values": self.k_values,
                           "accuracy": {str(k): v for k, v in self.accuracy.items()},
                           "n_queries": self.n_queries})


def similarity_grid(z_query, grid) -> np.ndarray:
    """(rows, cols) cosine similarities between the query and every cell."""
    z = z_query.data if isinstance(z_query, nd.Tensor) else np.asarray(z_query)
    return grid.cells @ z.astype(grid.cells.dtype)


def _crop_input(img: Image, spec: CropSpec, size: int) -> np.ndarray:
    piece = crop(img, spec)
    return prepare_image(resize(piece, size, size, "bilinear"), size)


def embed_crops(model: GridSeekModel, samples: Sequence[tuple[Image, CropSpec]],
                chunk: int = 64) -> np.ndarray:
    n = model.spec.crop_size
    out = []
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        x = nd.Tensor(np.stack([_crop_input(img, spec, n) for img, spec in part]))
        with nd.no_grad():
            _, z = model.encode_crops(x)
        out.append(z.data)
    return np.concatenate(out)


def embed_images(model: GridSeekModel, images: Sequence[Image], chunk: int = 32) -> list[PyramidEmbeddings]:
    size = model.spec.image_size
    out: list[PyramidEmbeddings] = []
    for start in range(0, len(images), chunk):
        part = images[start:start + chunk]
        x = nd.Tensor(np.stack([prepare_image(img, size) for img in part]))
        with nd.no_grad():
            levels = model.encode_images(x)
        out.extend(PyramidEmbeddings.from_batch(levels, b, size) for b in range(len(part)))
    return out


def grid_hits(z_query: np.ndarray, pyr: PyramidEmbeddings, spec: CropSpec,
              source_size: tuple[int, int]) -> list[bool]:
    """Per level: does the argmax cell's center fall inside the crop?"""
    rect = crop_rect(spec, source_size, pyr.input_size)
    hits = []
    for grid in pyr.grids:
        sims = similarity_grid(z_query, grid).reshape(-1)
        best = int(np.argmax(sims))  # first maximum = lowest row-major index
        hits.append(bool(inside_mask(rect, grid.rows, grid.cols, grid.stride)[best]))
    return hits


def sga(model: GridSeekModel, eval_set: Sequence[tuple[Image, CropSpec]]) -> SgaResult:
    """Per-level similarity-grid accuracy of ``model`` on (image, crop) pairs."""
    if not eval_set:
        raise ValueError("SGA needs a non-empty evaluation set")
    z = embed_crops(model, eval_set)
    # encode each distinct image once
    uniq: dict[int, int] = {}
    images: list[Image] = []
    for img, _ in eval_set:
        if id(img) not in uniq:
            uniq[id(img)] = len(images)
            images.append(img)
    pyrs = embed_images(model, images)
    correct = np.zeros(N_LEVELS)
    for s, (img, spec) in enumerate(eval_set):
        correct += grid_hits(z[s], pyrs[uniq[id(img)]], spec, (img.width, img.height))
    return SgaResult([float(c / len(eval_set)) for c in correct], len(eval_set))


def random_baseline(eval_set: Sequence[tuple[Image, CropSpec]], image_size: int) -> tuple[list[float], list[float]]:
    """Expected SGA of a uniformly random cell pick, with its standard deviation.

    Returns ``(mean, sigma)`` per level, where the sample count follows a
    Poisson-binomial distribution with per-sample success probability
    ``cells inside crop / total cells``.
    """
    means, sigmas = [], []
    for level in range(N_LEVELS):
        rows, cols = grid_shape(image_size, level)
        stride = level_stride(level)
        p = np.array([inside_mask(crop_rect(spec, (img.width, img.height), image_size),
                                  rows, cols, stride).mean() for img, spec in eval_set])
        means.append(float(p.mean()))
        sigmas.append(float(math.sqrt((p * (1 - p)).sum()) / len(p)))
    return means, sigmas


def make_eval_set(images: Sequence[tuple[str, Image]], n_samples: int, seed: int) -> list[tuple[Image, CropSpec]]:
    """``n_samples`` crops cycling over the images, drawn with the eval seed."""
    out = []
    for s in range(n_samples):
        image_id, img = images[s % len(images)]
        out.append((img, sample_crop(img, (seed, 0xE7A1, s), source_id=image_id)))
    return out


def topk_accuracy(index, model: GridSeekModel, queries: Sequence[tuple[Image, CropSpec]],
                  ks: Sequence[int] = DEFAULT_KS) -> TopKResult:
    """Fraction of crop queries whose source image ranks in the top k.

    The source image stays among the candidates.
    """
    from .index import query as run_query

    if not queries:
        raise ValueError("top-k evaluation needs at least one query")
    known = set(index.ids)
    for _, spec in queries:
        if spec.source_id not in known:
            raise KeyError(f"query source {spec.source_id!r} is not in the index")
    ks = sorted(set(int(k) for k in ks))
    z = embed_crops(model, queries)
    hits = {k: 0 for k in ks}
    for s, (_, spec) in enumerate(queries):
        ranked = run_query(index, z[s], max(ks))
        ids = [r.image_id for r in ranked]
        for k in ks:
            hits[k] += spec.source_id in ids[:k]
    return TopKResult(ks, {k: hits[k] / len(queries) for k in ks}, len(queries))


class EpochTracker:
    """Accumulates per-step metrics; :meth:`finish` averages them."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        self.steps: list[tuple[float, float, float]] = []

    def add(self, positive_sim: float, negative_sim: float, loss: float) -> None:
        self.steps.append((float(positive_sim), float(negative_sim), float(loss)))

    def finish(self) -> EpochStats:
        if not self.steps:
            raise ValueError(f"epoch {self.epoch} recorded no steps")
        arr = np.array(self.steps, dtype=np.float64)
        pos, neg, loss = arr.mean(axis=0)
        return EpochStats(self.epoch, float(pos), float(neg), float(loss))


def track_epoch(step_metrics: Iterable[tuple[float, float, float]], epoch: int = 0) -> EpochStats:
    tracker = EpochTracker(epoch)
    for pos, neg, loss in step_metrics:
        tracker.add(pos, neg, loss)
    return tracker.finish()


def append_jsonl(path, record: str) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record + "\n")


def write_json(path, text: str) -> None:
    Path(path).write_text(text + "\n", encoding="utf-8")
