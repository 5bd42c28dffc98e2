import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridseek.data import scan_images
from gridseek.evalkit import (EpochTracker, make_eval_set, random_baseline, sga, similarity_grid,
                              topk_accuracy, track_epoch)
from gridseek.imops import CropSpec, read_image
from gridseek.index import build_index
from gridseek.net import EmbeddingGrid, GridSeekModel

from oracles import unit_rows
from rigged import SPEC, LocatingModel, RandomEmbeddingModel, coordinate_image


# ---------------------------------------------------------- similarity grid

def test_grid_with_query_cell_peaks_at_one(rng):
    cells = unit_rows(rng, 12, 8).reshape(3, 4, 8)
    sims = similarity_grid(cells[1, 2], EmbeddingGrid(0, cells))
    assert sims[1, 2] == pytest.approx(1.0) and sims.max() == sims[1, 2]


def test_identical_cells_give_constant_grid(rng):
    v = unit_rows(rng, 1, 8)[0]
    sims = similarity_grid(unit_rows(rng, 1, 8)[0], EmbeddingGrid(0, np.tile(v, (4, 4, 1))))
    assert np.ptp(sims) == 0.0


def test_similarity_grid_matches_scalar_dots(rng):
    cells = unit_rows(rng, 64, 16).reshape(8, 8, 16)
    z = unit_rows(rng, 1, 16)[0]
    sims = similarity_grid(z, EmbeddingGrid(1, cells))
    for r in range(8):
        for c in range(8):
            assert abs(sims[r, c] - math.fsum(a * b for a, b in zip(z, cells[r, c]))) <= 1e-12
    assert np.all(np.abs(sims) <= 1.0 + 1e-12)


# -------------------------------------------------------------------- SGA

@pytest.mark.parametrize("level", [0, 1])
def test_locating_model_is_perfect_at_its_level(level):
    img = coordinate_image()
    samples = make_eval_set([("coord", img)], 300, seed=3)
    result = sga(LocatingModel(level), samples)
    assert result.per_level[level] == 1.0
    assert result.n_samples == 300


def test_full_image_crops_score_one_everywhere(shapes_images):
    model = GridSeekModel(seed=5)
    samples = [(img, CropSpec(0, 0, img.width, img.height, i)) for i, img in shapes_images[:6]]
    assert sga(model, samples).per_level == [1.0] * 5


def test_random_embeddings_match_analytic_baseline():
    img = coordinate_image()
    samples = make_eval_set([("a", img)], 1000, seed=17)
    result = sga(RandomEmbeddingModel(seed=2), samples)
    means, sigmas = random_baseline(samples, SPEC.image_size)
    for level in range(5):
        assert abs(result.per_level[level] - means[level]) <= 3 * sigmas[level] + 1e-12, level


def test_baseline_by_direct_counting():
    img = coordinate_image()
    spec = CropSpec(8, 8, 24, 16)
    means, sigmas = random_baseline([(img, spec)], 64)
    # level 0: cell centers 2, 6, ..., so x in [8, 32) holds 6 and y in [8, 24) holds 4
    assert means[0] == pytest.approx(24 / 256)
    assert sigmas[0] == pytest.approx(math.sqrt(24 / 256 * (1 - 24 / 256)))


def test_sga_deterministic_and_bounded(shapes_images):
    model = GridSeekModel(seed=1)
    samples = make_eval_set(shapes_images[:4], 20, seed=9)
    a, b = sga(model, samples), sga(model, samples)
    assert a == b and all(0.0 <= v <= 1.0 for v in a.per_level)
    assert json.loads(a.to_json())["n_samples"] == 20


def test_sga_rejects_empty_set():
    with pytest.raises(ValueError):
        sga(GridSeekModel(), [])


def test_eval_crops_carry_source_ids(shapes_images):
    samples = make_eval_set(shapes_images[:3], 7, seed=1)
    assert [s.source_id for _, s in samples] == [shapes_images[i % 3][0] for i in range(7)]


# ------------------------------------------------------------------ top-k

@pytest.fixture(scope="module")
def small_index(shapes_dir):
    model = GridSeekModel(seed=2)
    items = list(scan_images(shapes_dir))[:6]
    return model, build_index(model, items), [(i, read_image(p)) for i, p in items]


def test_topk_monotone_and_full_k_is_one(small_index):
    model, index, images = small_index
    queries = make_eval_set(images, 12, seed=4)
    result = topk_accuracy(index, model, queries, [1, 3, 5, len(index)])
    accs = [result.accuracy[k] for k in sorted(result.accuracy)]
    assert accs == sorted(accs)
    assert result.accuracy[len(index)] == 1.0
    assert result.n_queries == 12


def test_single_image_index_is_always_top_one(shapes_dir):
    model = GridSeekModel(seed=2)
    item = list(scan_images(shapes_dir))[0]
    index = build_index(model, [item])
    queries = make_eval_set([(item[0], read_image(item[1]))], 5, seed=0)
    assert topk_accuracy(index, model, queries, [1]).accuracy[1] == 1.0


def test_query_source_must_be_indexed(small_index):
    model, index, images = small_index
    img = images[0][1]
    with pytest.raises(KeyError):
        topk_accuracy(index, model, [(img, CropSpec(0, 0, 20, 20, "not-there"))])


# -------------------------------------------------------------- epoch stats

def test_single_step_epoch():
    stats = track_epoch([(0.7, 0.1, 2.5)], epoch=3)
    assert (stats.epoch, stats.avg_positive_sim, stats.avg_negative_sim, stats.avg_loss) == (3, 0.7, 0.1, 2.5)


def test_constant_stream():
    stats = track_epoch([(0.25, -0.5, 1.0)] * 17)
    assert (stats.avg_positive_sim, stats.avg_negative_sim, stats.avg_loss) == (0.25, -0.5, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 50)), min_size=1, max_size=200))
def test_random_stream_matches_scalar_means(steps):
    stats = track_epoch(steps)
    for got, column in zip((stats.avg_positive_sim, stats.avg_negative_sim, stats.avg_loss), zip(*steps)):
        assert abs(got - math.fsum(column) / len(column)) <= 1e-12 * max(1.0, abs(got))


def test_empty_epoch_rejected():
    with pytest.raises(ValueError):
        EpochTracker(0).finish()
