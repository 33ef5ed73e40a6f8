#!/usr/bin/env python3
"""Why token pruning has a hard accuracy ceiling on dense tasks.

Run with `python3 demos/pruning_information_loss.py [checkpoint.pxv]`
(a couple of seconds without a checkpoint).

Uniform 2D subsampling keeps a fraction fr of the vision cells. On a task
that queries every cell with equal probability, any model — no matter how
well trained — answers at most

    fr + (1 - fr) / S

of the queries: the kept fraction exactly, plus a 1/S guess on the rest.
A proxy schedule keeps every token (at reduced per-layer cost), so it has
no such ceiling. That separation is what the comparison suite measures;
this demo shows the ceiling itself, straight from the data.
"""

import sys

import numpy as np

from proxyv.data import COL_BASE, ROW_BASE, make_batch, prune_grid
from proxyv.rng import SeededRng

S = 16  # symbol alphabet


print("== analytic ceiling by keep fraction ==")
for stride in (1, 2, 4):
    fr = 1.0 / (stride * stride)
    print(f"stride {stride}: keep {fr:5.2%} of cells -> accuracy <= {fr + (1 - fr) / S:.3f}")

print()
print("== the data says the same ==")
batch = make_batch("dense_recall", SeededRng(3), 50_000, grids=1, side=8)
for stride in (2, 4):
    pruned = prune_grid(batch, stride)
    # a query is answerable only if its cell survived the subsampling
    r = batch.text[:, 1] - ROW_BASE
    c = batch.text[:, 2] - COL_BASE
    answerable = ((r % stride == 0) & (c % stride == 0)).mean()
    fr = 1.0 / (stride * stride)
    print(f"stride {stride}: {pruned.n_vision}/{batch.n_vision} cells kept, "
          f"{answerable:5.1%} of 50k queries still answerable (expect {fr:.1%})")

print()
print("== coordinates survive pruning; content does not ==")
pruned = prune_grid(batch, 2)
rows = sorted(set((pruned.row_tok[0] - ROW_BASE).tolist()))
cols = sorted(set((pruned.col_tok[0] - COL_BASE).tolist()))
print(f"kept cells still carry original coordinates: rows {rows}, cols {cols}")
print("a query for row 3 stays well-posed, but no surviving cell answers it")

if len(sys.argv) > 1:
    from proxyv.checkpoint import load_model
    from proxyv.harness import ExperimentSpec, evaluate

    print()
    print("== measured on a trained checkpoint ==")
    model, ckpt = load_model(sys.argv[1])
    spec = ExperimentSpec.from_dict(ckpt.meta["spec"])
    val = make_batch(spec.task, SeededRng(spec.seed).child("data.val"),
                     2048, **spec.task_kwargs)
    import dataclasses
    full = evaluate(model, val, spec)
    quarter = evaluate(model, val, dataclasses.replace(spec, prune_keep=0.25))
    print(f"unpruned accuracy   {full:.3f}")
    print(f"keep 1/4 of cells   {quarter:.3f}   (ceiling 0.297)")
