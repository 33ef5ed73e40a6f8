"""Command-line front end: dataset generation, training, evaluation, the
masking sweep, the comparison suite, and cost reports.

Config files are JSON with the ExperimentSpec fields (see
docs/experiment_spec.schema.json); --seed/--mode/--start-layer override the
corresponding spec fields without editing the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .costs import (
    TokenCounts,
    VICUNA_7B,
    counts_for_schedule,
    model_report,
    params_guided_update,
    params_light_mlp,
    reference_suite,
    render_suite,
)
from .errors import ConfigError
from .harness import (
    ExperimentSpec,
    build_datasets,
    evaluate,
    load_spec,
    run_comparison_suite,
    run_training,
    sweep_mask,
)
from .checkpoint import load_model
from .modes import parse_mode, suffix_schedule


def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    if getattr(args, "seed", None) is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    model = spec.model
    if getattr(args, "mode", None) is not None:
        model = dataclasses.replace(model, mode=parse_mode(args.mode).value)
    if getattr(args, "start_layer", None) is not None:
        model = dataclasses.replace(model, start_layer=args.start_layer)
    if model is not spec.model:
        spec = dataclasses.replace(spec, model=model)
    return spec


def _spec_from_args(args) -> ExperimentSpec:
    if args.config is None:
        raise ConfigError("--config is required for this subcommand")
    return _apply_overrides(load_spec(args.config), args)


# ---- subcommands ----


def cmd_gen(args) -> int:
    spec = _spec_from_args(args)
    train, val = build_datasets(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, b in (("train", train), ("val", val)):
        np.savez(out / f"{name}.npz", sym=b.sym, row_tok=b.row_tok, col_tok=b.col_tok,
                 text=b.text, target=b.target,
                 geometry=np.array([b.grids, b.grid_rows, b.grid_cols]))
    hist = np.bincount(train.target, minlength=spec.model.vocab).tolist()
    stats = {"task": spec.task, "seed": spec.seed, "config_hash": spec.config_hash,
             "train_examples": train.size, "val_examples": val.size,
             "answer_histogram": hist}
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    print(f"wrote {train.size} train / {val.size} val examples to {out}")
    return 0


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    result = run_training(spec, out_dir=args.out, log=print)
    print(f"final val_acc {result.val_acc:.4f} after {spec.steps} steps "
          f"({result.duration_s:.1f} s); checkpoint at {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model, ckpt = load_model(args.checkpoint)
    if "spec" not in ckpt.meta:
        raise ConfigError(f"checkpoint {args.checkpoint} carries no training spec metadata")
    spec = ExperimentSpec.from_dict(ckpt.meta["spec"])
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    _, val = build_datasets(spec)
    acc = evaluate(model, val, spec, mask_fraction=args.mask_fraction)
    print(f"val_acc {acc:.6f} on {val.size} examples"
          + (f" (mask_fraction {args.mask_fraction})" if args.mask_fraction else ""))
    return 0


def cmd_sweep_mask(args) -> int:
    fractions = [float(f) for f in args.fractions.split(",") if f.strip() != ""]
    rows = sweep_mask(args.checkpoint, fractions, out_dir=args.out, log=print)
    if args.out:
        print(f"wrote {len(rows)} rows to {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_compare(args) -> int:
    spec = _spec_from_args(args)
    start = spec.seed
    seeds = tuple(start + i for i in range(args.replicates))
    rows = run_comparison_suite(spec, args.out, seeds=seeds, log=print)
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_cost(args) -> int:
    if args.paper_suite:
        rows = reference_suite()
        print(render_suite(rows))
        print("added parameters per layer (4096 wide, 1024 hidden):")
        print(f"  light mlp      {params_light_mlp(4096, 1024):,}")
        print(f"  guided update  {params_guided_update(4096, 1024):,}")
        return 0 if all(r.passed for r in rows) else 1
    if args.config is not None:
        spec = _spec_from_args(args)
        cfg = spec.model
        arch = cfg.arch_spec()
        schedule = cfg.layer_modes
        nv = cfg.grids * cfg.grid_side ** 2
        proxies = cfg.proxies_per_grid * cfg.grids if any(m.uses_proxies for m in schedule) else 0
        counts = counts_for_schedule(schedule, nv, spec.text_tokens, cfg.grids, proxies)
        report = model_report(schedule, counts, arch,
                              baseline_counts=TokenCounts(nv, 0, spec.text_tokens, cfg.grids))
        print(report.render())
        return 0
    # no config: the 7B-shape preset scenario (5 grids of 576 + separators, 50 text)
    mode = parse_mode(args.mode if args.mode is not None else "baseline")
    start = args.start_layer if args.start_layer is not None else 0
    schedule = suffix_schedule(VICUNA_7B.layers, mode, start)
    grids, text = 5, 55
    nv = grids * 576
    proxies = grids * 36 if any(m.uses_proxies for m in schedule) else 0
    counts = counts_for_schedule(schedule, nv, text, grids, proxies)
    report = model_report(schedule, counts, VICUNA_7B,
                          baseline_counts=TokenCounts(nv, 0, text, grids))
    print(report.render())
    return 0


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxyv",
                                description="proxy-vision-token laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_required=False):
        if config:
            sp.add_argument("--config", type=Path, help="JSON experiment spec")
        sp.add_argument("--seed", type=int, help="override the spec seed")
        sp.add_argument("--mode", type=str, help="override the layer mode")
        sp.add_argument("--start-layer", dest="start_layer", type=int,
                        help="override the mode start layer")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    sp = sub.add_parser("gen", help="materialize train/val datasets")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train one experiment spec")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on its validation set")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--seed", type=int, help="override the spec seed for the data")
    sp.add_argument("--mask-fraction", dest="mask_fraction", type=float, default=0.0,
                    help="mask vision attention in the last fraction of layers")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-mask", help="training-free masking curve from a checkpoint")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--fractions", type=str, default="0,0.25,0.5,0.75,1.0")
    sp.add_argument("--out", type=Path, help="output directory")
    sp.set_defaults(func=cmd_sweep_mask)

    sp = sub.add_parser("compare", help="baseline vs proxy vs prune vs pool suite")
    common(sp, out_required=True)
    sp.add_argument("--replicates", type=int, default=3, help="seeds run: seed..seed+n-1")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("cost", help="analytic FLOPs/parameter report")
    sp.add_argument("--config", type=Path, help="JSON experiment spec to cost")
    sp.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    sp.add_argument("--mode", type=str, help="layer mode for the preset shape")
    sp.add_argument("--start-layer", dest="start_layer", type=int,
                    help="mode start layer for the preset shape")
    sp.add_argument("--paper-suite", dest="paper_suite", action="store_true",
                    help="print the published-figure reproduction table")
    sp.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
