"""Synthetic task generators: determinism, marginals, and pruning geometry."""

import numpy as np
import pytest

from proxyv.data import (
    COL_BASE,
    GRID_BASE,
    MAJ_ID,
    MAX_SIDE,
    N_SYMBOLS,
    ROW_BASE,
    Batch,
    batch_at,
    fixed_batches,
    gen_dense_recall,
    gen_majority,
    make_batch,
    prune_grid,
)
from proxyv.errors import ConfigError, ShapeError
from proxyv.rng import SeededRng


# chi-square critical values at alpha = 0.001
CHI2_DF15 = 37.697
CHI2_DF63 = 103.442


def test_dense_recall_same_seed_identical():
    a = gen_dense_recall(SeededRng(7), 64, grids=2, side=4)
    b = gen_dense_recall(SeededRng(7), 64, grids=2, side=4)
    for name in ("sym", "row_tok", "col_tok", "text", "target"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_dense_recall_seeds_differ():
    a = gen_dense_recall(SeededRng(7), 64, side=4)
    b = gen_dense_recall(SeededRng(8), 64, side=4)
    assert not np.array_equal(a.sym, b.sym)


def test_dense_recall_answer_matches_grid():
    b = gen_dense_recall(SeededRng(3), 256, grids=2, side=4)
    g = b.text[:, 0] - GRID_BASE
    r = b.text[:, 1] - ROW_BASE
    c = b.text[:, 2] - COL_BASE
    idx = g * 16 + r * 4 + c
    assert np.array_equal(b.target, b.sym[np.arange(256), idx])


def test_dense_recall_token_ranges():
    b = gen_dense_recall(SeededRng(1), 128, grids=3, side=8)
    assert b.sym.min() >= 0 and b.sym.max() < N_SYMBOLS
    assert set(np.unique(b.row_tok)) <= set(range(ROW_BASE, ROW_BASE + 8))
    assert set(np.unique(b.col_tok)) <= set(range(COL_BASE, COL_BASE + 8))
    assert b.text.shape == (128, 3)
    assert set(np.unique(b.text[:, 0])) <= set(range(GRID_BASE, GRID_BASE + 3))


def test_dense_recall_answer_marginal_uniform():
    b = gen_dense_recall(SeededRng(11), 10_000, side=8)
    counts = np.bincount(b.target, minlength=N_SYMBOLS)
    expected = 10_000 / N_SYMBOLS
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_DF15, f"answer marginal chi-square {chi2:.1f}"


def test_dense_recall_query_position_uniform():
    b = gen_dense_recall(SeededRng(12), 20_000, side=8)
    r = b.text[:, 1] - ROW_BASE
    c = b.text[:, 2] - COL_BASE
    counts = np.bincount(r * 8 + c, minlength=64)
    expected = 20_000 / 64
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_DF63, f"query position chi-square {chi2:.1f}"


def test_dense_recall_geometry_validation():
    with pytest.raises(ConfigError):
        gen_dense_recall(SeededRng(0), 4, grids=0)
    with pytest.raises(ConfigError):
        gen_dense_recall(SeededRng(0), 4, side=MAX_SIDE + 1)


def test_majority_answer_is_strict_mode():
    b = gen_majority(SeededRng(5), 512, side=8)
    for i in range(512):
        counts = np.bincount(b.sym[i], minlength=N_SYMBOLS)
        top = counts.max()
        assert (counts == top).sum() == 1, f"sample {i} has a tied majority"
        assert counts[b.target[i]] == top
    assert b.text.shape == (512, 1)
    assert (b.text == MAJ_ID).all()


def test_majority_same_seed_identical():
    a = gen_majority(SeededRng(9), 128)
    b = gen_majority(SeededRng(9), 128)
    assert np.array_equal(a.sym, b.sym) and np.array_equal(a.target, b.target)


def test_majority_answer_marginal_uniform():
    b = gen_majority(SeededRng(13), 10_000, side=8)
    counts = np.bincount(b.target, minlength=N_SYMBOLS)
    expected = 10_000 / N_SYMBOLS
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_DF15, f"majority marginal chi-square {chi2:.1f}"


# ---- pruning ----


def test_prune_keeps_stride_lattice_with_original_coordinates():
    b = gen_dense_recall(SeededRng(2), 32, grids=2, side=8)
    p = prune_grid(b, 2)
    assert p.grid_rows == p.grid_cols == 4
    assert p.n_vision == 2 * 16
    # kept cells are the even-row, even-column lattice, coordinates untouched
    rows = p.row_tok[0].reshape(2, 16) - ROW_BASE
    cols = p.col_tok[0].reshape(2, 16) - COL_BASE
    assert np.array_equal(rows[0], np.repeat([0, 2, 4, 6], 4))
    assert np.array_equal(cols[0], np.tile([0, 2, 4, 6], 4))
    # symbol content survives for the kept cells
    orig = b.sym[:, :64].reshape(32, 8, 8)
    assert np.array_equal(p.sym[:, :16].reshape(32, 4, 4), orig[:, ::2, ::2])


def test_prune_stride_one_is_identity():
    b = gen_dense_recall(SeededRng(2), 8, side=4)
    assert prune_grid(b, 1) is b


def test_prune_rejects_nondividing_stride():
    b = gen_dense_recall(SeededRng(2), 8, side=4)
    with pytest.raises(ConfigError):
        prune_grid(b, 3)


def test_prune_makes_most_queries_unanswerable():
    # with 1/4 of cells kept, at most ~25% of queries still have their cell
    b = gen_dense_recall(SeededRng(4), 4096, side=8)
    p = prune_grid(b, 2)
    r = b.text[:, 1] - ROW_BASE
    c = b.text[:, 2] - COL_BASE
    answerable = ((r % 2 == 0) & (c % 2 == 0)).mean()
    assert abs(answerable - 0.25) < 0.03


# ---- batch plumbing ----


def test_batch_shape_validation():
    b = gen_dense_recall(SeededRng(0), 4, side=4)
    with pytest.raises(ShapeError):
        Batch("dense_recall", b.sym[:, :-1], b.row_tok, b.col_tok, b.text, b.target, 1, 4, 4)
    with pytest.raises(ShapeError):
        Batch("dense_recall", b.sym, b.row_tok, b.col_tok, b.text, b.target[:-1], 1, 4, 4)


def test_make_batch_rejects_unknown_task():
    with pytest.raises(ConfigError):
        make_batch("recall", SeededRng(0), 4)


def test_batch_at_is_stable_per_index():
    root = SeededRng(42)
    a = batch_at("dense_recall", root, 3, 16, side=4)
    b = batch_at("dense_recall", SeededRng(42), 3, 16, side=4)
    assert np.array_equal(a.sym, b.sym) and np.array_equal(a.text, b.text)
    c = batch_at("dense_recall", root, 4, 16, side=4)
    assert not np.array_equal(a.sym, c.sym)


def test_fixed_batches_cover_distinct_indices():
    batches = fixed_batches("dense_recall", SeededRng(8), 3, 8, side=4)
    assert len(batches) == 3
    assert not np.array_equal(batches[0].sym, batches[1].sym)
