#!/usr/bin/env python3
"""End-to-end tour of the experiment harness on a small config.

Run with `python3 demos/experiment_pipeline.py` (well under a minute).
Everything lands in a temp directory that is printed at the end.

The walk: build a spec, materialize its datasets, train a small baseline,
evaluate it, and then re-run the identical spec to show the whole pipeline
is bit-deterministic — same seed, same bytes, down to the checkpoint
digest. Determinism is load-bearing here: the comparison suites normalize
every variant by its same-seed baseline, which is only meaningful when a
seed pins the run exactly.
"""

import tempfile
from pathlib import Path

from proxyv.checkpoint import file_digest, load_checkpoint
from proxyv.harness import ExperimentSpec, build_datasets, evaluate, run_training
from proxyv.model import ModelConfig

spec = ExperimentSpec(
    model=ModelConfig(layers=2, width=32, heads=4, ffn_width=64, vocab=64,
                      grids=1, grid_side=4, init_std=0.08),
    seed=7,
    train_examples=2048,
    val_examples=512,
    steps=60,
    batch_size=32,
    eval_interval=20,
    eval_examples=256,
    warmup_steps=5,
)

root = Path(tempfile.mkdtemp(prefix="pipeline-demo-"))

print("== datasets ==")
train, val = build_datasets(spec)
print(f"train {train.size} examples, val {val.size}; "
      f"{train.n_vision} vision cells + {train.n_text} prompt tokens each")

print()
print("== training ==")
result = run_training(spec, out_dir=root / "run-a", log=print)
print(f"final val accuracy {result.val_acc:.4f} in {result.duration_s:.1f} s")

print()
print("== artifacts ==")
for p in sorted((root / "run-a").iterdir()):
    print(f"  {p.name:16s} {p.stat().st_size:8,d} bytes")

ckpt = load_checkpoint(result.checkpoint_path)
print(f"checkpoint meta keys: {sorted(ckpt.meta)}")
print("the spec travels inside the checkpoint, so eval/sweep need no extra config")

print()
print("== determinism ==")
again = run_training(spec, out_dir=root / "run-b")
da = file_digest(result.checkpoint_path)
db = file_digest(again.checkpoint_path)
print(f"run-a checkpoint sha256 {da[:16]}...")
print(f"run-b checkpoint sha256 {db[:16]}...")
print(f"bit-identical: {da == db}")

print()
print("== evaluation variants ==")
acc = evaluate(result.model, val, spec)
masked = evaluate(result.model, val, spec, mask_fraction=1.0)
print(f"plain accuracy        {acc:.4f}")
print(f"all layers masked     {masked:.4f}   (vision attention suppressed at eval)")
print()
print(f"artifacts kept under {root}")
