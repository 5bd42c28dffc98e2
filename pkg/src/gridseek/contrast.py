"""Anchor-based NT-Xent loss and positive/anchor selection on pyramid grids.

For a crop embedding ``z_i`` with positive pyramid cell ``z_j``::

    AN     = sum_{a in A} exp(sim(z_i, z_a) / tau)
    l_ij   = -log( exp(sim(z_i, z_j)/tau)
                   / (sum_{k != i} exp(sim(z_i, z_k)/tau) + AN) )

where ``k`` runs over the 2N batch embeddings (every sample's crop
embedding and positive cell) and ``A`` holds same-image cells away from the
crop.  Everything is evaluated as a masked log-sum-exp with the maximum
logit subtracted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .errors import DomainError, ShapeError
from .ndgrad import Tensor, as_tensor

UNIT_TOL = 1e-4


@dataclass
class LossConfig:
    tau: float = 0.1
    batch_size: int = 1
    anchors_per_sample: Optional[int] = 64

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AnchorSet:
    embeddings: Tensor  # [A, D]
    provenance: list[tuple[int, int, int]] = field(default_factory=list)  # (level, row, col)

    def __post_init__(self):
        self.embeddings = as_tensor(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ShapeError(f"anchor embeddings must be [A, D], got {self.embeddings.shape}")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "AnchorSet":
        return cls(Tensor(np.zeros((0, dim))))


def _vec(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)


def cosine_sim(a, b) -> float:
    """Dot product of two unit vectors."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: dimension mismatch {a.shape} vs {b.shape}")
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise DomainError(f"cosine_sim expects unit vectors (norm {np.linalg.norm(v):.6f})")
    return float(np.clip(a @ b, -1.0, 1.0))


def anchor_negative_term(z_i, anchors: AnchorSet, tau: float) -> float:
    """AN: summed exponentiated similarities between ``z_i`` and every anchor."""
    if not tau > 0:
        raise DomainError("tau must be positive")
    if len(anchors) == 0:
        return 0.0
    sims = anchors.embeddings.data.astype(np.float64) @ _vec(z_i)
    return float(np.exp(sims / tau).sum())


def ant_xent_loss(z_i, z_j, batch: Sequence, anchors: AnchorSet, cfg: LossConfig) -> Tensor:
    """Loss for one (crop, positive) pair.

    ``batch`` lists the 2N batch embeddings and must contain ``z_i`` and
    ``z_j`` (matched by identity, else by value); one occurrence of ``z_i``
    is left out of the denominator.
    """
    z_i, z_j = as_tensor(z_i), as_tensor(z_j)
    batch = [as_tensor(b) for b in batch]
    i_pos = _locate(z_i, batch)
    j_pos = _locate(z_j, batch, skip=i_pos)
    if j_pos is None:
        raise ValueError("z_j is not among the batch embeddings")
    others = [b for k, b in enumerate(batch) if k != i_pos]
    j_in_others = j_pos if i_pos is None or j_pos < i_pos else j_pos - 1

    d = z_i.shape[-1]
    zi_col = nd.reshape(z_i, (d, 1))
    parts = [nd.reshape(nd.stack(others), (len(others), d))]
    if len(anchors):
        parts.append(anchors.embeddings)
    cand = nd.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    logits = nd.scalar_mul(nd.reshape(nd.matmul(cand, zi_col), (1, -1)), 1.0 / cfg.tau)
    lse = nd.logsumexp(logits, axis=1)
    pos = logits[0, j_in_others]
    return nd.reshape(nd.sub(lse, pos), ())


def _locate(z: Tensor, batch: list[Tensor], skip: Optional[int] = None) -> Optional[int]:
    for k, b in enumerate(batch):
        if k != skip and b is z:
            return k
    for k, b in enumerate(batch):
        if k != skip and b.shape == z.shape and np.array_equal(b.data, z.data):
            return k
    return None


def per_sample_losses(z_i: Tensor, z_j: Tensor, anchors: Tensor, anchor_mask: np.ndarray,
                      tau: float) -> Tensor:
    """Vectorized l_ij for B samples.

    z_i, z_j: [B, D]; anchors: [B, A, D] with boolean ``anchor_mask`` [B, A].
    Batch negatives of sample i are all rows of ``z_i`` and ``z_j`` except
    row i of ``z_i``.
    """
    B, D = z_i.shape
    q = nd.concat([z_i, z_j], axis=0)
    batch_sims = nd.matmul(z_i, nd.transpose(q))  # [B, 2B]
    parts = [batch_sims]
    masks = [~np.eye(B, 2 * B, dtype=bool)]
    if anchors.shape[1] > 0:
        a_sims = nd.reshape(nd.matmul(anchors, nd.reshape(z_i, (B, D, 1))), (B, anchors.shape[1]))
        parts.append(a_sims)
        masks.append(np.asarray(anchor_mask, dtype=bool))
    logits = nd.scalar_mul(nd.concat(parts, axis=1) if len(parts) > 1 else parts[0], 1.0 / tau)
    lse = nd.logsumexp(logits, axis=1, mask=np.concatenate(masks, axis=1))
    rows = np.arange(B)
    pos = logits[rows, B + rows]
    return nd.sub(lse, pos)


def batch_loss(samples: Sequence[tuple], cfg: LossConfig) -> Tensor:
    """Mean l_ij over ``(z_i, z_j, anchors)`` samples sharing batch negatives."""
    if not samples:
        raise ValueError("batch_loss needs at least one sample")
    z_i = nd.stack([as_tensor(s[0]) for s in samples])
    z_j = nd.stack([as_tensor(s[1]) for s in samples])
    B, D = z_i.shape
    width = max(len(s[2]) for s in samples)
    mask = np.zeros((B, width), dtype=bool)
    rows = []
    for b, (_, _, anchors) in enumerate(samples):
        n = len(anchors)
        mask[b, :n] = True
        block = anchors.embeddings
        if n < width:
            pad = Tensor(np.zeros((width - n, D), dtype=z_i.dtype))
            block = nd.concat([block, pad], axis=0) if n else pad
        rows.append(nd.reshape(block, (1, width, D)))
    anchors = nd.concat(rows, axis=0) if width else Tensor(np.zeros((B, 0, D), dtype=z_i.dtype))
    return nd.mean(per_sample_losses(z_i, z_j, anchors, mask, cfg.tau))


# ---------------------------------------------------------------- geometry

def cell_centers(rows: int, cols: int, stride: float) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (row-major) x and y centers of a grid's cells."""
    cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride,
                         indexing="ij")
    return cx.reshape(-1), cy.reshape(-1)


def inside_mask(rect, rows: int, cols: int, stride: float) -> np.ndarray:
    """Cells whose center lies in the half-open rectangle ``[x0, x1) x [y0, y1)``.

    Half-open matches pixel coverage: a crop of width w at x0 covers pixels
    x0 .. x0 + w - 1, i.e. the interval [x0, x0 + w).
    """
    x0, y0, x1, y1 = rect
    cx, cy = cell_centers(rows, cols, stride)
    return (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)


def positive_index(rect, rows: int, cols: int, stride: float) -> int:
    """Row-major index of the cell nearest the rectangle center (ties -> lowest)."""
    x0, y0, x1, y1 = rect
    mx, my = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    cx, cy = cell_centers(rows, cols, stride)
    return int(np.argmin((cx - mx) ** 2 + (cy - my) ** 2))


def anchor_indices(rect, rows: int, cols: int, stride: float, pos: int,
                   cap: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    keep = ~inside_mask(rect, rows, cols, stride)
    keep[pos] = False
    idx = np.flatnonzero(keep)
    if cap is not None and len(idx) > cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(idx, size=cap, replace=False))
    return idx


def crop_rect(crop, source_size: Optional[tuple[int, int]], input_size: int):
    """CropSpec in source pixels -> (x0, y0, x1, y1) in the model input frame."""
    if source_size is None:
        sx = sy = 1.0
    else:
        sx, sy = input_size / source_size[0], input_size / source_size[1]
    return (crop.x0 * sx, crop.y0 * sy, (crop.x0 + crop.w) * sx, (crop.y0 + crop.h) * sy)


def select_positive_and_anchors(pyr, crop, level: int, source_size: Optional[tuple[int, int]] = None,
                                cap: Optional[int] = None, rng: Optional[np.random.Generator] = None):
    """Positive cell ``z_j`` and anchor negatives for a crop at one pyramid level.

    ``crop`` is in the pixel frame of an image of ``source_size`` (defaults
    to the model input frame).  Returns ``(z_j, AnchorSet)``.
    """
    if not 0 <= level < len(pyr.grids):
        raise ValueError(f"level {level} out of range")
    grid = pyr[level]
    rect = crop_rect(crop, source_size, pyr.input_size)
    pos = positive_index(rect, grid.rows, grid.cols, grid.stride)
    idx = anchor_indices(rect, grid.rows, grid.cols, grid.stride, pos, cap, rng)
    flat = grid.cells.reshape(-1, grid.cells.shape[-1])
    prov = [(level, int(i) // grid.cols, int(i) % grid.cols) for i in idx]
    anchors = AnchorSet(Tensor(flat[idx], dtype=flat.dtype), prov)
    return Tensor(flat[pos], dtype=flat.dtype), anchors


def pyramid_loss(z_i: Tensor, levels: Sequence[Tensor], rects: Sequence, cfg: LossConfig,
                 rng: Optional[np.random.Generator] = None) -> tuple[Tensor, dict]:
    """Training objective: per-level batch losses summed over all levels.

    ``levels`` are the pipeline-2 outputs [B, D, h, w]; ``rects`` give each
    sample's crop rectangle in the input frame.  Also returns similarity
    statistics for epoch tracking.
    """
    B = z_i.shape[0]
    input_size = levels[0].shape[2] * 4
    total = None
    stats = {"pos_sum": 0.0, "pos_n": 0, "neg_sum": 0.0, "neg_n": 0}
    rows = np.arange(B)
    for level, cells in enumerate(levels):
        _, D, h, w = cells.shape
        stride = input_size / h
        flat = nd.transpose(nd.reshape(cells, (B, D, h * w)), (0, 2, 1))  # [B, hw, D]
        pos = np.empty(B, dtype=int)
        mask = np.zeros((B, h * w), dtype=bool)
        for b, rect in enumerate(rects):
            pos[b] = positive_index(rect, h, w, stride)
            mask[b, anchor_indices(rect, h, w, stride, pos[b], cfg.anchors_per_sample, rng)] = True
        z_j = flat[rows, pos]
        losses = per_sample_losses(z_i, z_j, flat, mask, cfg.tau)
        level_loss = nd.mean(losses)
        total = level_loss if total is None else nd.add(total, level_loss)

        zi, zj, fl = z_i.data, z_j.data, flat.data
        pos_s = np.einsum("bd,bd->b", zi, zj)
        stats["pos_sum"] += float(pos_s.sum())
        stats["pos_n"] += B
        batch_s = zi @ np.concatenate([zi, zj]).T
        neg_mask = ~np.eye(B, 2 * B, dtype=bool)
        neg_mask[rows, B + rows] = False
        anchor_s = np.einsum("bd,bkd->bk", zi, fl)
        stats["neg_sum"] += float(batch_s[neg_mask].sum() + anchor_s[mask].sum())
        stats["neg_n"] += int(neg_mask.sum() + mask.sum())
    return total, stats
