"""The two encoders: crop encoder (pipeline 1) and pyramid encoder (pipeline 2).

Pipeline 1 maps a query crop to a backbone representation ``r`` and a
unit-norm embedding ``z``.  Pipeline 2 maps the full image to five grids of
unit-norm cell embeddings at strides 4..64 using a small feature pyramid.
The two pipelines own disjoint parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .data import ModelVariant, TrainConfig
from .errors import CheckpointError, ShapeError
from .imops import Image, resize
from .ndgrad import Conv2d, Linear, Module, Tensor
from .ndgrad.checkpoint import load_weights, save_weights

N_LEVELS = 5
FINEST_STRIDE = 4


def level_stride(level: int) -> int:
    return FINEST_STRIDE * 2 ** level


def grid_shape(image_size: int, level: int) -> tuple[int, int]:
    n = image_size // level_stride(level)
    return n, n


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; everything a checkpoint's shapes imply."""

    channels: tuple[int, int, int] = (16, 32, 64)
    repr_dim: int = 128
    embedding_dim: int = 32
    fpn_channels: int = 32
    projection_head: bool = True
    image_size: int = 64
    crop_size: int = 32

    def __post_init__(self):
        top = level_stride(N_LEVELS - 1)
        if self.image_size % top:
            raise ShapeError(f"image_size {self.image_size} must be a multiple of {top}")

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ModelSpec":
        return cls(repr_dim=cfg.repr_dim, embedding_dim=cfg.embedding_dim,
                   fpn_channels=cfg.fpn_channels, projection_head=cfg.variant.projection_head,
                   image_size=cfg.image_size, crop_size=cfg.crop_size)


class Backbone(Module):
    """Stem conv (stride 2) followed by three stride-2 stages of two 3x3 convs."""

    def __init__(self, rng, channels: Sequence[int]):
        c1, c2, c3 = channels
        self.stem = Conv2d(rng, 3, c1, 3, stride=2, padding=1)
        self.stage1 = [Conv2d(rng, c1, c1, 3, 2, 1), Conv2d(rng, c1, c1, 3, 1, 1)]
        self.stage2 = [Conv2d(rng, c1, c2, 3, 2, 1), Conv2d(rng, c2, c2, 3, 1, 1)]
        self.stage3 = [Conv2d(rng, c2, c3, 3, 2, 1), Conv2d(rng, c3, c3, 3, 1, 1)]

    def __call__(self, x: Tensor) -> list[Tensor]:
        # pixels in [0, 1] -> roughly zero-mean, unit-scale
        h = nd.relu(self.stem(nd.scalar_mul(nd.sub(x, 0.5), 4.0)))
        feats = []
        for stage in (self.stage1, self.stage2, self.stage3):
            for conv in stage:
                h = nd.relu(conv(h))
            feats.append(h)
        return feats  # strides 4, 8, 16 relative to the input


class CropEncoder(Module):
    """Pipeline 1: backbone -> global pool -> r -> linear/relu/linear -> z."""

    def __init__(self, rng, spec: ModelSpec):
        self.backbone = Backbone(rng, spec.channels)
        self.neck = Conv2d(rng, spec.channels[2], spec.repr_dim, 1)
        self.head_hidden = Linear(rng, spec.repr_dim, spec.repr_dim)
        self.head_out = Linear(rng, spec.repr_dim, spec.embedding_dim)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        c3 = self.backbone(x)[-1]
        r = nd.global_avg_pool(nd.relu(self.neck(c3)))
        z = self.head_out(nd.relu(self.head_hidden(r)))
        return r, nd.l2_normalize(z, axis=1)


class PyramidEncoder(Module):
    """Pipeline 2: backbone + top-down pyramid + per-cell head.

    Levels 0-2 fuse lateral 1x1 projections of the stage features with the
    nearest-upsampled coarser level; levels 3-4 are extra stride-2 convs on
    top of the coarsest stage.  Each cell vector goes through a shared head
    (two 1x1 layers with a ReLU when ``projection_head`` is set, otherwise a
    single 1x1 map) and is normalized.
    """

    def __init__(self, rng, spec: ModelSpec):
        c1, c2, c3 = spec.channels
        f = spec.fpn_channels
        self.backbone = Backbone(rng, spec.channels)
        self.lateral = [Conv2d(rng, c1, f, 1), Conv2d(rng, c2, f, 1), Conv2d(rng, c3, f, 1)]
        self.smooth = [Conv2d(rng, f, f, 3, 1, 1) for _ in range(3)]
        self.extra = [Conv2d(rng, c3, f, 3, 2, 1), Conv2d(rng, f, f, 3, 2, 1)]
        if spec.projection_head:
            self.head = [Conv2d(rng, f, f, 1), Conv2d(rng, f, spec.embedding_dim, 1)]
        else:
            self.head = [Conv2d(rng, f, spec.embedding_dim, 1)]

    def features(self, x: Tensor) -> list[Tensor]:
        c1, c2, c3 = self.backbone(x)
        p2 = self.lateral[2](c3)
        p1 = self.lateral[1](c2) + nd.upsample_nearest2x(p2)
        p0 = self.lateral[0](c1) + nd.upsample_nearest2x(p1)
        p3 = self.extra[0](c3)
        p4 = self.extra[1](nd.relu(p3))
        return [self.smooth[0](p0), self.smooth[1](p1), self.smooth[2](p2), p3, p4]

    def project(self, p: Tensor) -> Tensor:
        h = p
        for i, layer in enumerate(self.head):
            if i:
                h = nd.relu(h)
            h = layer(h)
        return nd.l2_normalize(h, axis=1)

    def __call__(self, x: Tensor) -> list[Tensor]:
        return [self.project(p) for p in self.features(x)]


class GridSeekModel(Module):
    def __init__(self, spec: ModelSpec = ModelSpec(), seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.p1 = CropEncoder(rng, spec)
        self.p2 = PyramidEncoder(rng, spec)

    def named_parameters(self, prefix: str = ""):
        yield from self.p1.named_parameters(prefix + "p1.")
        yield from self.p2.named_parameters(prefix + "p2.")

    # ------------------------------------------------------------ batch paths
    def encode_crops(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """[B, 3, crop, crop] -> (r [B, D_r], z [B, D_z])."""
        n = self.spec.crop_size
        if x.ndim != 4 or x.shape[1:] != (3, n, n):
            raise ShapeError(f"crop batch must be [B, 3, {n}, {n}], got {x.shape}")
        return self.p1(x)

    def encode_images(self, x: Tensor) -> list[Tensor]:
        """[B, 3, S, S] -> five tensors [B, D_z, S/stride, S/stride]."""
        n = self.spec.image_size
        if x.ndim != 4 or x.shape[1:] != (3, n, n):
            raise ShapeError(f"image batch must be [B, 3, {n}, {n}], got {x.shape}")
        return self.p2(x)


# --------------------------------------------------------------- single-image

@dataclass
class EmbeddingGrid:
    level: int
    cells: np.ndarray  # (rows, cols, D)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def stride(self) -> int:
        return level_stride(self.level)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center x and y coordinates (input-frame pixels), each (rows, cols)."""
        s = self.stride
        cy, cx = np.meshgrid((np.arange(self.rows) + 0.5) * s, (np.arange(self.cols) + 0.5) * s,
                             indexing="ij")
        return cx, cy


@dataclass
class PyramidEmbeddings:
    grids: list[EmbeddingGrid]
    input_size: int

    def __post_init__(self):
        if len(self.grids) != N_LEVELS:
            raise ShapeError(f"expected {N_LEVELS} grids, got {len(self.grids)}")

    def __getitem__(self, level: int) -> EmbeddingGrid:
        return self.grids[level]

    @classmethod
    def from_batch(cls, levels: Sequence[Tensor], b: int, input_size: int) -> "PyramidEmbeddings":
        return cls([EmbeddingGrid(lv, np.ascontiguousarray(t.data[b].transpose(1, 2, 0)))
                    for lv, t in enumerate(levels)], input_size)


def prepare_image(img: Image, size: int) -> np.ndarray:
    if (img.width, img.height) != (size, size):
        img = resize(img, size, size, "bilinear")
    return img.to_chw(nd.get_default_dtype())


def encode_crop(model: GridSeekModel, crop_img: Image) -> tuple[np.ndarray, np.ndarray]:
    """Single crop -> (r, z) as numpy vectors; the crop is resized to crop_size."""
    x = Tensor(prepare_image(crop_img, model.spec.crop_size)[None])
    with nd.no_grad():
        r, z = model.encode_crops(x)
    return r.data[0], z.data[0]


def encode_image(model: GridSeekModel, img: Image) -> PyramidEmbeddings:
    x = Tensor(prepare_image(img, model.spec.image_size)[None])
    with nd.no_grad():
        levels = model.encode_images(x)
    return PyramidEmbeddings.from_batch(levels, 0, model.spec.image_size)


# ------------------------------------------------------------- persistence

def parameters(model: Module) -> list[nd.Parameter]:
    return model.parameters()


def save(model: GridSeekModel, path) -> None:
    save_weights({name: p.data for name, p in model.named_parameters()}, path)


def infer_spec(weights: dict[str, np.ndarray], image_size: int = 64, crop_size: int = 32) -> ModelSpec:
    try:
        channels = (weights["p1.backbone.stem.weight"].shape[0],
                    weights["p1.backbone.stage2.0.weight"].shape[0],
                    weights["p1.backbone.stage3.0.weight"].shape[0])
        repr_dim = weights["p1.neck.weight"].shape[0]
        emb = weights["p1.head_out.weight"].shape[0]
        fpn = weights["p2.lateral.0.weight"].shape[0]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks parameter {exc}") from None
    return ModelSpec(channels, repr_dim, emb, fpn, "p2.head.1.weight" in weights, image_size, crop_size)


def load(path, config: Optional[TrainConfig] = None, spec: Optional[ModelSpec] = None) -> GridSeekModel:
    """Rebuild a model from a checkpoint, validating every name and shape."""
    weights = load_weights(path)
    if spec is None:
        if config is not None:
            spec = ModelSpec.from_config(config)
        else:
            spec = infer_spec(weights)
    model = GridSeekModel(spec, seed=0)
    expected = dict(model.named_parameters())
    unknown = sorted(set(weights) - set(expected))
    if unknown:
        raise CheckpointError(f"unknown parameter {unknown[0]} in checkpoint")
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameter {missing[0]}")
    dtype = nd.get_default_dtype()
    for name, p in expected.items():
        if weights[name].shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {weights[name].shape} vs model {p.shape}")
        p.data = weights[name].astype(dtype)
    return model
