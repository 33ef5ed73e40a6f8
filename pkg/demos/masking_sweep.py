#!/usr/bin/env python3
"""Training-free vision-attention masking, swept over layer fractions.

Usage:
    python3 demos/masking_sweep.py <checkpoint.pxv>   (seconds)
    python3 demos/masking_sweep.py   (no args: trains a baseline first; this
                                      uses the reference recipe and takes a
                                      coffee break on one core)

Masking removes the attention update for vision rows in the last
round(fraction * layers) layers at evaluation time only; text rows still
read every key. The point of the sweep: a trained model keeps almost all
of its accuracy when the LAST layers stop updating vision tokens, and
only degrades once masking reaches the early layers where the lookup
circuit actually lives. That asymmetry is the whole case for spending
less on vision tokens in late layers.
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

from proxyv.harness import load_spec, run_training, sweep_mask

SUITE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "comparison_suite.json"
FRACTIONS = [0.0, 0.25, 0.5, 0.75, 1.0]


def quick_checkpoint() -> Path:
    # reference recipe, shortened: enough training for the layer asymmetry
    # to show, not enough for a polished accuracy number
    spec = dataclasses.replace(load_spec(SUITE_CONFIG),
                               train_examples=20_000, val_examples=2_000,
                               eval_interval=250, eval_examples=512)
    out = Path(tempfile.mkdtemp(prefix="mask-demo-"))
    minutes = spec.steps * 0.15 / 60
    print(f"no checkpoint given; training a baseline first (~{minutes:.0f} min)")
    result = run_training(spec, out_dir=out, log=print)
    print(f"trained to val accuracy {result.val_acc:.3f}")
    return result.checkpoint_path


def main() -> int:
    if len(sys.argv) > 1:
        ckpt = Path(sys.argv[1])
    else:
        ckpt = quick_checkpoint()
    out = Path(tempfile.mkdtemp(prefix="mask-sweep-"))
    rows = sweep_mask(ckpt, FRACTIONS, out_dir=out, log=print)
    print()
    print("fraction of layers masked -> relative accuracy")
    for r in rows:
        bar = "#" * int(round(r.rel_score * 40))
        print(f"  {r.fraction:4.2f}  {r.rel_score:6.3f}  {bar}")
    print()
    print(f"rows also written to {out}/metrics.csv")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
