"""Persistent retrieval index over pyramid cell embeddings, and crop search.

An image's score for a query is the best cosine similarity over every stored
cell of every level; the winning cell is reported alongside the score.
"""

from __future__ import annotations

import base64
import html
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, ImageError, IndexFormatError, ShapeError
from .imops import Image, png_bytes, read_image
from .net import GridSeekModel, encode_image

log = logging.getLogger(__name__)

INDEX_MAGIC = b"GSKI"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U32 = struct.Struct("<I")


def _cell_dtype(dim: int) -> np.dtype:
    # packed little-endian record: u8 level, u16 row, u16 col, dim x f32
    return np.dtype([("level", "u1"), ("row", "<u2"), ("col", "<u2"), ("vec", "<f4", (dim,))])


@dataclass
class IndexEntry:
    image_id: str
    path: str
    cells: np.ndarray  # structured array of _cell_dtype(dim)

    @property
    def vectors(self) -> np.ndarray:
        return self.cells["vec"]


@dataclass
class RetrievalIndex:
    dim: int
    entries: list[IndexEntry]
    format_version: int = INDEX_VERSION
    _matrix: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, init=False, repr=False,
                                                            compare=False)

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise IndexFormatError(f"duplicate image id {dup!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    @property
    def cell_count(self) -> int:
        return sum(len(e.cells) for e in self.entries)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All cell vectors as one float64 matrix plus the owning entry per row."""
        if self._matrix is None:
            vecs = [e.vectors.astype(np.float64) for e in self.entries]
            owner = np.concatenate([np.full(len(v), i) for i, v in enumerate(vecs)]) if vecs else np.zeros(0, int)
            mat = np.concatenate(vecs) if vecs else np.zeros((0, self.dim))
            self._matrix = (mat, owner)
        return self._matrix


@dataclass(frozen=True)
class RankedResult:
    image_id: str
    score: float
    best_cell: tuple[int, int, int]  # (level, row, col)


# ------------------------------------------------------------------ building

def entry_for(model: GridSeekModel, image_id: str, img: Image, path: str = "") -> IndexEntry:
    pyr = encode_image(model, img)
    dim = model.spec.embedding_dim
    records = []
    for grid in pyr.grids:
        rec = np.zeros(grid.rows * grid.cols, dtype=_cell_dtype(dim))
        rr, cc = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
        rec["level"] = grid.level
        rec["row"] = rr.reshape(-1)
        rec["col"] = cc.reshape(-1)
        rec["vec"] = grid.cells.reshape(-1, dim)
        records.append(rec)
    return IndexEntry(image_id, path, np.concatenate(records))


def build_index(model: GridSeekModel, items: Iterable[tuple[str, object]], *, threads: int = 1,
                on_error: Optional[Callable[[str, Exception], None]] = None) -> RetrievalIndex:
    """Encode every ``(image_id, path)`` and store all of its cell embeddings.

    Unreadable files are reported through ``on_error`` (logged by default)
    and skipped; an index with no successful image is an error.
    """
    items = list(items)

    def encode(item):
        image_id, path = item
        try:
            img = read_image(path)
        except (ImageError, OSError) as exc:
            return exc
        return entry_for(model, image_id, img, str(path))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(encode, items))
    else:
        results = [encode(item) for item in items]

    entries = []
    for (image_id, _), res in zip(items, results):
        if isinstance(res, Exception):
            if on_error is not None:
                on_error(image_id, res)
            else:
                log.warning("skipping %s: %s", image_id, res)
        else:
            entries.append(res)
    if not entries:
        raise DataError(f"no image could be indexed out of {len(items)}")
    return RetrievalIndex(model.spec.embedding_dim, entries)


# ------------------------------------------------------------------- queries

def query(index: RetrievalIndex, z_query, k: int) -> list[RankedResult]:
    """Top-``k`` images by max cell similarity; ties go to the smaller image id."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    z = np.asarray(getattr(z_query, "data", z_query), dtype=np.float64).reshape(-1)
    if z.shape[0] != index.dim:
        raise ShapeError(f"query has dimension {z.shape[0]}, index has {index.dim}")
    mat, owner = index.stacked()
    sims = mat @ z
    results = []
    start = 0
    for entry in index.entries:
        n = len(entry.cells)
        part = sims[start:start + n]
        best = int(np.argmax(part))  # first maximum in stored order
        cell = entry.cells[best]
        results.append(RankedResult(entry.image_id, float(part[best]),
                                    (int(cell["level"]), int(cell["row"]), int(cell["col"]))))
        start += n
    results.sort(key=lambda r: (-r.score, r.image_id))
    return results[:k]


# --------------------------------------------------------------- persistence

def encode_index(index: RetrievalIndex) -> bytes:
    dtype = _cell_dtype(index.dim)
    out = [_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, len(index.entries))]
    for e in index.entries:
        for text in (e.image_id, e.path):
            raw = text.encode("utf-8")
            out += [_U32.pack(len(raw)), raw]
        out.append(_U32.pack(len(e.cells)))
        out.append(np.ascontiguousarray(e.cells, dtype=dtype).tobytes())
    return b"".join(out)


def index_file_size(dim: int, entries: Sequence[tuple[str, str, int]]) -> int:
    """Byte size for ``(image_id, path, n_cells)`` records; mirrors :func:`encode_index`."""
    per_cell = 1 + 2 + 2 + 4 * dim
    return _HEADER.size + sum(3 * _U32.size + len(i.encode()) + len(p.encode()) + n * per_cell
                              for i, p, n in entries)


def decode_index(data: bytes) -> RetrievalIndex:
    if len(data) < _HEADER.size:
        raise IndexFormatError("index file truncated in header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}, not an index file")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version} (expected {INDEX_VERSION})")
    if dim < 1:
        raise IndexFormatError("index dimension must be positive")
    dtype = _cell_dtype(dim)
    pos = _HEADER.size

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise IndexFormatError(f"index file truncated in {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    entries = []
    for i in range(count):
        fields = []
        for what in ("image id", "path"):
            (n,) = _U32.unpack(take(_U32.size, what))
            try:
                fields.append(take(n, what).decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise IndexFormatError(f"entry {i}: {what} is not UTF-8") from exc
        (n_cells,) = _U32.unpack(take(_U32.size, "cell count"))
        cells = np.frombuffer(take(n_cells * dtype.itemsize, "cells"), dtype=dtype).copy()
        if n_cells and int(cells["level"].max()) > 4:
            raise IndexFormatError(f"entry {i}: pyramid level out of range")
        entries.append(IndexEntry(fields[0], fields[1], cells))
    if pos != len(data):
        raise IndexFormatError(f"{len(data) - pos} trailing bytes after {count} entries")
    return RetrievalIndex(dim, entries)


def save_index(index: RetrievalIndex, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_index(index))
    os.replace(tmp, path)


def load_index(path) -> RetrievalIndex:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read index {path}: {exc}") from exc
    return decode_index(data)


# -------------------------------------------------------------------- report

def border_color(rank: int, k: int) -> str:
    """Hex color for 1-based ``rank`` of ``k``: red at rank 1, blue at rank k."""
    if not 1 <= rank <= k:
        raise ValueError(f"rank {rank} outside 1..{k}")
    t = 0.0 if k == 1 else (rank - 1) / (k - 1)
    return f"#{round(255 * (1 - t)):02X}00{round(255 * t):02X}"


def _data_uri(img: Image) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes(img)).decode("ascii")


def emit_report(query_crop: Image, results: Sequence[RankedResult], images: Mapping[str, Image],
                out_path) -> None:
    """Self-contained HTML page: the query crop, then the ranked thumbnails."""
    if not results:
        raise ValueError("report needs at least one result")
    k = len(results)
    cards = []
    for rank, res in enumerate(results, start=1):
        level, row, col = res.best_cell
        cards.append(
            f'<figure class="hit" style="border:6px solid {border_color(rank, k)}">'
            f'<img src="{_data_uri(images[res.image_id])}" alt="{html.escape(res.image_id)}">'
            f"<figcaption>#{rank} {html.escape(res.image_id)}<br>score {res.score:.4f}<br>"
            f"cell L{level} ({row}, {col})</figcaption></figure>")
    page = (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>crop search</title>"
        "<style>body{font-family:sans-serif}figure{display:inline-block;margin:6px;padding:2px}"
        "img{width:128px;image-rendering:pixelated}</style></head><body>\n"
        f'<h2>query</h2><figure class="query"><img src="{_data_uri(query_crop)}" alt="query"></figure>\n'
        f"<h2>top {k}</h2>\n" + "\n".join(cards) + "\n</body></html>\n")
    Path(out_path).write_text(page, encoding="utf-8")
