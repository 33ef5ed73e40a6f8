"""Synthetic grid tasks with a fixed 64-entry vocabulary.

Vision "images" are raster grids of symbol cells. A cell's embedding is the
sum of its symbol, row, and column token embeddings, so content stays bound
to its coordinates no matter how the grid is later pruned or pooled.

dense_recall: G grids of uniform random symbols; the text side names a grid,
a row, and a column, and the answer is the symbol at that cell. Every cell
matters, so any token reduction that discards cells destroys answers.

majority: one grid; the answer is the most frequent symbol (ties are
regenerated). Summary statistics survive pooling, so this is the task where
averaging cells is nearly harmless.

Answers are read as the next-token prediction at the final text position,
the way a decoder would emit the first response token after the prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import SeededRng

VOCAB = 64
N_SYMBOLS = 16
MAX_SIDE = 8
MAX_GRIDS = 8
ROW_BASE = 16   # row r -> ROW_BASE + r
COL_BASE = 24
GRID_BASE = 32  # grid g -> GRID_BASE + g
SEP_ID = 40
MAJ_ID = 41


@dataclass(frozen=True)
class Batch:
    """One batch of grid tasks; vision ids are (B, n_vision) in grid-major
    raster order, text is (B, n_text), target is (B,) symbol ids."""

    task: str
    sym: np.ndarray
    row_tok: np.ndarray
    col_tok: np.ndarray
    text: np.ndarray
    target: np.ndarray
    grids: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        b = self.sym.shape[0]
        nv = self.grids * self.grid_rows * self.grid_cols
        for name in ("sym", "row_tok", "col_tok"):
            if getattr(self, name).shape != (b, nv):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(b, nv)}")
        if self.text.shape[0] != b or self.target.shape != (b,):
            raise ShapeError(f"text {self.text.shape} / target {self.target.shape} do not match batch {b}")

    @property
    def size(self) -> int:
        return self.sym.shape[0]

    @property
    def n_vision(self) -> int:
        return self.sym.shape[1]

    @property
    def n_text(self) -> int:
        return self.text.shape[1]


def _check_geometry(grids: int, side: int) -> None:
    if not 1 <= grids <= MAX_GRIDS:
        raise ConfigError(f"grids must lie in [1, {MAX_GRIDS}], got {grids}")
    if not 1 <= side <= MAX_SIDE:
        raise ConfigError(f"grid side must lie in [1, {MAX_SIDE}], got {side}")


def _coord_tokens(batch: int, grids: int, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.repeat(np.arange(rows), cols)
    c = np.tile(np.arange(cols), rows)
    row_tok = np.tile(ROW_BASE + r, grids)
    col_tok = np.tile(COL_BASE + c, grids)
    return (np.broadcast_to(row_tok, (batch, grids * rows * cols)).copy(),
            np.broadcast_to(col_tok, (batch, grids * rows * cols)).copy())


def gen_dense_recall(rng: SeededRng, batch: int, grids: int = 1, side: int = 8) -> Batch:
    """Uniform random grids; query one cell by (grid, row, col) tokens.

    The answer is read at the final query token, so the column token's
    hidden state only has to fetch the row and grid tokens sitting next
    to it before looking the cell up."""
    _check_geometry(grids, side)
    nv = grids * side * side
    sym = rng.integers(0, N_SYMBOLS, (batch, nv))
    g = rng.integers(0, grids, (batch,))
    r = rng.integers(0, side, (batch,))
    c = rng.integers(0, side, (batch,))
    target = sym[np.arange(batch), g * side * side + r * side + c]
    text = np.stack([GRID_BASE + g, ROW_BASE + r, COL_BASE + c], axis=1)
    row_tok, col_tok = _coord_tokens(batch, grids, side, side)
    return Batch("dense_recall", sym, row_tok, col_tok, text, target, grids, side, side)


def gen_majority(rng: SeededRng, batch: int, side: int = 8) -> Batch:
    """One grid per sample; the answer is the strictly most frequent symbol.

    Grids whose top count is tied are redrawn, so every kept sample has a
    unique answer. Symbols are exchangeable, so answers stay uniform."""
    _check_geometry(1, side)
    nv = side * side
    sym = rng.integers(0, N_SYMBOLS, (batch, nv))
    for _ in range(1000):
        counts = np.zeros((batch, N_SYMBOLS), dtype=np.int64)
        np.add.at(counts, (np.arange(batch)[:, None], sym), 1)
        top = counts.max(axis=1)
        tied = (counts == top[:, None]).sum(axis=1) > 1
        if not tied.any():
            break
        sym[tied] = rng.integers(0, N_SYMBOLS, (int(tied.sum()), nv))
    else:
        raise ConfigError(f"could not break majority ties for side={side} after 1000 redraws")
    target = counts.argmax(axis=1)
    text = np.full((batch, 1), MAJ_ID)
    row_tok, col_tok = _coord_tokens(batch, 1, side, side)
    return Batch("majority", sym, row_tok, col_tok, text, target, 1, side, side)


def prune_grid(batch: Batch, stride: int) -> Batch:
    """Keep every stride-th cell in both axes, original coordinates intact.

    The kept cells form a smaller raster grid, but their row/column tokens
    still name positions in the original grid, so queries about dropped
    cells remain well-posed and mostly unanswerable."""
    if stride < 1 or batch.grid_rows % stride or batch.grid_cols % stride:
        raise ConfigError(f"stride {stride} does not divide grid {batch.grid_rows}x{batch.grid_cols}")
    if stride == 1:
        return batch
    rows, cols = batch.grid_rows, batch.grid_cols
    r = np.repeat(np.arange(rows), cols)
    c = np.tile(np.arange(cols), rows)
    keep_one = np.flatnonzero((r % stride == 0) & (c % stride == 0))
    keep = np.concatenate([keep_one + g * rows * cols for g in range(batch.grids)])
    return replace(
        batch,
        sym=batch.sym[:, keep],
        row_tok=batch.row_tok[:, keep],
        col_tok=batch.col_tok[:, keep],
        grid_rows=rows // stride,
        grid_cols=cols // stride,
    )


TASKS = {"dense_recall": gen_dense_recall, "majority": gen_majority}


def make_batch(task: str, rng: SeededRng, batch: int, **kw) -> Batch:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    return TASKS[task](rng, batch, **kw)


def batch_at(task: str, seed_rng: SeededRng, index: int, batch: int, **kw) -> Batch:
    """Batch `index` of a virtual infinite stream; same index, same batch."""
    return make_batch(task, seed_rng.child(f"batch.{index}"), batch, **kw)


def fixed_batches(task: str, seed_rng: SeededRng, count: int, batch: int, **kw) -> list[Batch]:
    return [batch_at(task, seed_rng, i, batch, **kw) for i in range(count)]
