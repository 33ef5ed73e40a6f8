"""Experiment driver: specs, deterministic training, masking sweeps, and the
token-reduction comparison suite.

Everything a run emits is derived from (spec, seed): datasets come from named
rng children, evaluation order is fixed, and CSV floats use fixed formats, so
re-running a spec reproduces metrics.csv byte for byte. Wall-clock timings go
to summary.md only, never into machine-read outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import file_digest, load_model, save_checkpoint
from .costs import TokenCounts, counts_for_schedule, masking_reduction, model_report
from .data import TASKS, Batch, SEP_ID, make_batch, prune_grid
from .errors import CheckpointError, ConfigError, TrainingError
from .model import Model, ModelConfig
from .modes import LayerMode
from .optim import Adam
from .rng import SeededRng
from .tensor import Tensor, add, backward, cross_entropy, no_grad, reshape, scale, take_rows

CSV_HEADER = "experiment_id,mode,start_layer,fraction,val_acc,rel_score,flops_reduction,steps,seed"


# ---- experiment specification ----


@dataclass(frozen=True, kw_only=True)
class ExperimentSpec:
    """One training/evaluation run, fully determined together with its seed.

    prune_keep and pool_factor shrink the vision input before the stack (for
    both training and evaluation); mask_fraction suppresses vision attention
    in the last layers at evaluation time only.
    """

    model: ModelConfig
    seed: int
    task: str = "dense_recall"
    train_examples: int = 50_000
    val_examples: int = 5_000
    steps: int = 1200
    finetune_steps: int = 300
    batch_size: int = 64
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 30
    eval_interval: int = 200
    eval_examples: int = 1024
    mask_fraction: float = 0.0
    prune_keep: float = 1.0
    pool_factor: int = 1
    experiment_id: str = ""

    def __post_init__(self):
        if not isinstance(self.model, ModelConfig):
            raise ConfigError("model: expected a ModelConfig")
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown {self.task!r}; expected one of {sorted(TASKS)}")
        for name in ("train_examples", "val_examples", "steps", "finetune_steps",
                     "batch_size", "eval_interval", "eval_examples", "pool_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be nonnegative, got {self.seed}")
        if self.batch_size > self.train_examples:
            raise ConfigError(f"batch_size: {self.batch_size} exceeds train_examples {self.train_examples}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ConfigError(f"mask_fraction: {self.mask_fraction} outside [0, 1]")
        if not 0.0 < self.prune_keep <= 1.0:
            raise ConfigError(f"prune_keep: {self.prune_keep} outside (0, 1]")
        side = self.model.grid_side
        s = self.prune_stride
        if abs(1.0 / (s * s) - self.prune_keep) > 1e-9 or side % s:
            raise ConfigError(f"prune_keep: {self.prune_keep} is not 1/s^2 for a stride s dividing side {side}")
        if side % self.pool_factor:
            raise ConfigError(f"pool_factor: {self.pool_factor} does not divide grid side {side}")
        if self.prune_keep < 1.0 and self.pool_factor > 1:
            raise ConfigError("prune_keep and pool_factor: at most one reduction may be active")
        if self.task == "majority" and self.model.grids != 1:
            raise ConfigError(f"task: majority uses a single grid, model has {self.model.grids}")

    @property
    def prune_stride(self) -> int:
        return max(1, round(1.0 / np.sqrt(self.prune_keep)))

    @property
    def task_kwargs(self) -> dict:
        if self.task == "majority":
            return {"side": self.model.grid_side}
        return {"grids": self.model.grids, "side": self.model.grid_side}

    @property
    def text_tokens(self) -> int:
        """Textlike token count entering the stack: prompt plus separators."""
        prompt = {"dense_recall": 3, "majority": 1}[self.task]
        return prompt + self.model.grids

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(ExperimentSpec)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown spec fields: {sorted(extra)}")
        if "model" not in d:
            raise ConfigError("model: missing")
        if "seed" not in d:
            raise ConfigError("seed: missing (every spec must pin one)")
        kw = dict(d)
        kw["model"] = ModelConfig.from_dict(kw["model"])
        return ExperimentSpec(**kw)

    @property
    def config_hash(self) -> str:
        """Hash of everything that shapes the run, excluding the label."""
        d = self.to_dict()
        d.pop("experiment_id")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def label(self, prefix: str) -> str:
        return f"{prefix}-s{self.seed}-{self.config_hash}"


def load_spec(path) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return ExperimentSpec.from_dict(raw)


# ---- data plumbing ----


def build_datasets(spec: ExperimentSpec) -> tuple[Batch, Batch]:
    """Materialize the train and validation sets from disjoint rng streams."""
    root = SeededRng(spec.seed)
    train = make_batch(spec.task, root.child("data.train"), spec.train_examples, **spec.task_kwargs)
    val = make_batch(spec.task, root.child("data.val"), spec.val_examples, **spec.task_kwargs)
    return train, val


def _slice(batch: Batch, idx: np.ndarray) -> Batch:
    return dataclasses.replace(
        batch,
        sym=batch.sym[idx], row_tok=batch.row_tok[idx], col_tok=batch.col_tok[idx],
        text=batch.text[idx], target=batch.target[idx],
    )


def _pool_member_indices(grids: int, rows: int, cols: int, r: int) -> list[np.ndarray]:
    """For each of the r*r block offsets, the member cell index per pooled cell."""
    g = np.arange(grids)[:, None, None] * rows * cols
    a = np.arange(rows // r)[None, :, None]
    b = np.arange(cols // r)[None, None, :]
    return [(g + (a * r + i) * cols + (b * r + j)).reshape(-1)
            for i in range(r) for j in range(r)]


def prepare_inputs(model: Model, batch: Batch, spec: ExperimentSpec):
    """Apply the spec's input reduction; returns (vis, text, grids, rows, cols)."""
    if spec.prune_keep < 1.0:
        batch = prune_grid(batch, spec.prune_stride)
    vis = model.encode_vision(batch.sym, batch.row_tok, batch.col_tok)
    rows, cols = batch.grid_rows, batch.grid_cols
    r = spec.pool_factor
    if r > 1:
        if rows % r or cols % r:
            raise ConfigError(f"pool_factor {r} does not divide grid {rows}x{cols}")
        members = _pool_member_indices(batch.grids, rows, cols, r)
        acc = take_rows(vis, members[0])
        for idx in members[1:]:
            acc = add(acc, take_rows(vis, idx))
        vis = scale(acc, 1.0 / (r * r))
        rows, cols = rows // r, cols // r
    return vis, batch.text, batch.grids, rows, cols


def _mask_flags(layers: int, fraction: float) -> list[bool] | None:
    """Vision attention is masked in the last round(fraction*layers) layers."""
    masked = int(round(fraction * layers))
    if masked == 0:
        return None
    return [i >= layers - masked for i in range(layers)]


# ---- evaluation ----


def evaluate(model: Model, batch: Batch, spec: ExperimentSpec, *,
             mask_fraction: float | None = None, limit: int | None = None,
             chunk: int = 256) -> float:
    """Accuracy of argmax answers over (a prefix of) a dataset; no gradients."""
    fraction = spec.mask_fraction if mask_fraction is None else mask_fraction
    flags = _mask_flags(model.config.layers, fraction)
    total = batch.size if limit is None else min(limit, batch.size)
    hit = 0
    with no_grad():
        for lo in range(0, total, chunk):
            part = _slice(batch, np.arange(lo, min(lo + chunk, total)))
            vis, text, grids, rows, cols = prepare_inputs(model, part, spec)
            logits = model.forward_prefill(vis, text, sep_id=SEP_ID, grids=grids,
                                           grid_rows=rows, grid_cols=cols, mask_vision=flags)
            hit += int((logits.data[:, 0].argmax(-1) == part.target).sum())
    return hit / total


# ---- training ----


@dataclass
class TrainResult:
    spec: ExperimentSpec
    model: Model
    log_rows: list[dict]
    val_acc: float
    checkpoint_path: Path | None
    duration_s: float


def _log_csv(rows: list[dict]) -> str:
    lines = ["step,train_loss,val_acc"]
    lines += [f"{r['step']},{r['train_loss']:.6f},{r['val_acc']:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def _warm_start(model: Model, state: dict[str, np.ndarray]) -> int:
    """Load every parameter whose name appears in `state`; modules the new
    schedule introduces (guided updates and friends) keep their fresh init."""
    matched = 0
    for name, p in model.named_parameters().items():
        arr = state.get(name)
        if arr is None:
            continue
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ConfigError(f"warm start: {name} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = np.ascontiguousarray(arr, dtype=model.config.np_dtype)
        matched += 1
    if matched == 0:
        raise ConfigError("warm start matched no parameters")
    return matched


def run_training(spec: ExperimentSpec, out_dir=None, log=None,
                 init_state: dict[str, np.ndarray] | None = None,
                 init_label: str = "") -> TrainResult:
    """Train the spec end to end; optionally persist checkpoint + logs.

    init_state warm-starts the parameters (finetuning protocol); the spec's
    own seed still drives data order, so a warm-started run is just as
    reproducible as a fresh one."""
    t0 = time.perf_counter()
    root = SeededRng(spec.seed)
    model = Model(spec.model, seed=root.child("model"))
    if init_state is not None:
        _warm_start(model, init_state)
    opt = Adam(model.parameters(), lr=spec.lr, beta1=spec.beta1, beta2=spec.beta2,
               warmup_steps=spec.warmup_steps)
    train, val = build_datasets(spec)
    batches_per_epoch = spec.train_examples // spec.batch_size
    perm, perm_epoch = None, -1
    log_rows: list[dict] = []
    loss_val = float("nan")
    for step in range(spec.steps):
        epoch, k = divmod(step, batches_per_epoch)
        if epoch != perm_epoch:
            perm = root.child(f"epoch.{epoch}").permutation(spec.train_examples)
            perm_epoch = epoch
        part = _slice(train, perm[k * spec.batch_size:(k + 1) * spec.batch_size])
        vis, text, grids, rows, cols = prepare_inputs(model, part, spec)
        logits = model.forward_prefill(vis, text, sep_id=SEP_ID, grids=grids,
                                       grid_rows=rows, grid_cols=cols)
        loss = cross_entropy(reshape(logits, (part.size, model.config.vocab)), part.target)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            worst = max(model.parameters(), key=lambda p: float(np.abs(p.data).max()))
            raise TrainingError(
                f"non-finite loss {loss_val} at step {step} (epoch {epoch}, lr {opt.current_lr():.3e}, "
                f"largest parameter {worst.name} with max|value| {float(np.abs(worst.data).max()):.3e})")
        opt.zero_grad()
        backward(loss)
        opt.step()
        if (step + 1) % spec.eval_interval == 0 or step + 1 == spec.steps:
            acc = evaluate(model, val, spec, mask_fraction=0.0, limit=spec.eval_examples)
            log_rows.append({"step": step + 1, "train_loss": loss_val, "val_acc": acc})
            if log:
                log(f"step {step + 1:>6}  loss {loss_val:.4f}  val_acc {acc:.4f}")
    val_acc = evaluate(model, val, spec, mask_fraction=0.0)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.pxv"
        meta = {"spec": spec.to_dict(), "seed": spec.seed, "steps": spec.steps,
                "final_val_acc": val_acc}
        if init_label:
            meta["init_from"] = init_label
        save_checkpoint(ckpt_path, spec.model.to_dict(), model.parameters(), opt=opt, meta=meta)
        (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
        (out_dir / "train_log.csv").write_text(_log_csv(log_rows))
    return TrainResult(spec, model, log_rows, val_acc, ckpt_path, time.perf_counter() - t0)


# ---- analytic cost hookup ----


def analytic_reduction(spec: ExperimentSpec) -> float:
    """Fractional prefill FLOPs saving of the spec's stack versus the full
    all-baseline stack on unreduced inputs; single-sourced from the cost model."""
    cfg = spec.model
    arch = cfg.arch_spec()
    side = cfg.grid_side
    full = TokenCounts(cfg.grids * side * side, 0, spec.text_tokens, cfg.grids)
    kept_side = side // spec.prune_stride // spec.pool_factor
    nv = cfg.grids * kept_side * kept_side
    schedule = cfg.layer_modes
    proxies = cfg.proxies_per_grid * cfg.grids if any(m.uses_proxies for m in schedule) else 0
    counts = counts_for_schedule(schedule, nv, spec.text_tokens, cfg.grids, proxies)
    report = model_report(schedule, counts, arch, baseline_counts=full)
    return report.reduction_percent / 100.0


def mask_reduction(spec: ExperimentSpec, fraction: float) -> float:
    """Fractional FLOPs saving of evaluating with the last layers masked."""
    cfg = spec.model
    side = cfg.grid_side
    counts = TokenCounts(cfg.grids * side * side, 0, spec.text_tokens, cfg.grids)
    masked = int(round(fraction * cfg.layers))
    return masking_reduction(cfg.layers, masked, counts, cfg.arch_spec())


# ---- results emission ----


@dataclass(frozen=True)
class ResultsRow:
    """One line of metrics.csv; fields mirror the fixed header."""

    experiment_id: str
    mode: str
    start_layer: int
    fraction: float
    val_acc: float
    rel_score: float
    flops_reduction: float
    steps: int
    seed: int

    def as_csv(self) -> str:
        return (f"{self.experiment_id},{self.mode},{self.start_layer},{self.fraction:.4f},"
                f"{self.val_acc:.6f},{self.rel_score:.6f},{self.flops_reduction:.6f},"
                f"{self.steps},{self.seed}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def render_csv(rows: list[ResultsRow]) -> str:
    return "\n".join([CSV_HEADER] + [r.as_csv() for r in rows]) + "\n"


def write_outputs(out_dir, rows: list[ResultsRow], report: dict, summary: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(render_csv(rows))
    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out_dir / "summary.md").write_text(summary)


# ---- masking sweep ----


def sweep_mask(checkpoint_path, fractions, out_dir=None, log=None) -> list[ResultsRow]:
    """Training-free vision-attention masking curve for a baseline checkpoint.

    Evaluation never touches the file; the digest is checked before and after."""
    digest_before = file_digest(checkpoint_path)
    model, ckpt = load_model(checkpoint_path)
    if any(m != LayerMode.BASELINE for m in model.config.layer_modes):
        raise ConfigError("sweep_mask needs an all-baseline checkpoint; "
                          f"schedule is {[m.value for m in model.config.layer_modes]}")
    if "spec" not in ckpt.meta:
        raise ConfigError(f"checkpoint {checkpoint_path} carries no training spec metadata")
    spec = ExperimentSpec.from_dict(ckpt.meta["spec"])
    fractions = sorted(set(float(f) for f in fractions))
    if not fractions:
        raise ConfigError("sweep_mask needs at least one fraction")
    if fractions[0] < 0.0 or fractions[-1] > 1.0:
        raise ConfigError(f"fractions must lie in [0, 1], got {fractions}")
    _, val = build_datasets(spec)
    base_acc = evaluate(model, val, spec, mask_fraction=0.0)
    rows = []
    for f in fractions:
        acc = base_acc if f == 0.0 else evaluate(model, val, spec, mask_fraction=f)
        rows.append(ResultsRow(
            experiment_id=spec.label("sweep-mask"), mode=spec.model.mode,
            start_layer=spec.model.start_layer, fraction=f, val_acc=acc,
            rel_score=acc / base_acc, flops_reduction=mask_reduction(spec, f),
            steps=spec.steps, seed=spec.seed))
        if log:
            log(f"fraction {f:.2f}  val_acc {acc:.4f}  rel {acc / base_acc:.4f}")
    digest_after = file_digest(checkpoint_path)
    if digest_after != digest_before:
        raise CheckpointError(f"checkpoint {checkpoint_path} changed during evaluation")
    if out_dir is not None:
        report = {"kind": "sweep_mask", "checkpoint": str(checkpoint_path),
                  "config_hash": spec.config_hash, "rows": [r.as_dict() for r in rows]}
        lines = ["# Vision-attention masking sweep", "",
                 f"Checkpoint: `{checkpoint_path}` (digest `{digest_before[:12]}`)", "",
                 "| fraction | masked layers | val acc | relative | FLOPs saved |",
                 "|---:|---:|---:|---:|---:|"]
        for r in rows:
            masked = int(round(r.fraction * spec.model.layers))
            lines.append(f"| {r.fraction:.2f} | {masked} | {r.val_acc:.4f} | "
                         f"{r.rel_score:.4f} | {100 * r.flops_reduction:.1f}% |")
        write_outputs(out_dir, rows, report, "\n".join(lines) + "\n")
    return rows


# ---- comparison suite ----


SUITE_ARMS = ("baseline", "proxyv", "prune", "pool")


def suite_arm_specs(base: ExperimentSpec) -> dict[str, ExperimentSpec]:
    """The four standard arms: full stack, proxy stack from the midpoint,
    stride-2 pruning, and 2x2 mean pooling."""
    cfg = base.model
    if cfg.mode != "baseline" or base.prune_keep != 1.0 or base.pool_factor != 1:
        raise ConfigError("comparison base spec must be a plain baseline run")
    proxy_cfg = dataclasses.replace(cfg, mode="proxyv_spatial", start_layer=cfg.layers // 2)
    return {
        "baseline": base,
        "proxyv": dataclasses.replace(base, model=proxy_cfg),
        "prune": dataclasses.replace(base, prune_keep=0.25),
        "pool": dataclasses.replace(base, pool_factor=2),
    }


def _check_consistent(specs: dict[str, ExperimentSpec]) -> None:
    ref = next(iter(specs.values()))
    for name, s in specs.items():
        for field_name in ("task", "train_examples", "val_examples", "steps", "batch_size", "seed"):
            if getattr(s, field_name) != getattr(ref, field_name):
                raise ConfigError(f"arm {name}: {field_name} differs across the suite")
        for field_name in ("layers", "width", "heads", "ffn_width", "vocab", "grids", "grid_side"):
            if getattr(s.model, field_name) != getattr(ref.model, field_name):
                raise ConfigError(f"arm {name}: model.{field_name} differs across the suite")


def _dropped_fraction(spec: ExperimentSpec) -> float:
    if spec.prune_keep < 1.0:
        return 1.0 - spec.prune_keep
    if spec.pool_factor > 1:
        return 1.0 - 1.0 / spec.pool_factor ** 2
    return 0.0


def run_comparison_suite(base: ExperimentSpec, out_dir, seeds=(0, 1, 2), log=None) -> list[ResultsRow]:
    """Pretrain the baseline per seed, finetune the other arms from it, and
    join accuracies with analytic costs.

    Warm-starting the variants is the paper protocol writ small: every
    comparison arm finetunes the same pretrained stack. Per-seed relative
    scores divide by that seed's baseline accuracy; each written checkpoint
    is re-loaded for the reported evaluation and verified untouched by
    digest."""
    arms = suite_arm_specs(base)
    _check_consistent(arms)
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    rows: list[ResultsRow] = []
    timings: list[str] = []
    for seed in seeds:
        base_acc = None
        base_state: dict[str, np.ndarray] | None = None
        base_id = ""
        for arm in SUITE_ARMS:
            spec = dataclasses.replace(arms[arm], seed=seed)
            if arm != "baseline":
                spec = dataclasses.replace(spec, steps=spec.finetune_steps)
            spec = dataclasses.replace(spec, experiment_id=spec.label(arm))
            run_dir = out_dir / "runs" / spec.experiment_id
            if log:
                log(f"[{arm} seed={seed}] training {spec.steps} steps")
            result = run_training(spec, out_dir=run_dir, log=log,
                                  init_state=base_state, init_label=base_id)
            digest_before = file_digest(result.checkpoint_path)
            loaded, _ = load_model(result.checkpoint_path)
            acc = evaluate(loaded, build_datasets(spec)[1], spec)
            if file_digest(result.checkpoint_path) != digest_before:
                raise CheckpointError(f"{result.checkpoint_path} changed during evaluation")
            if arm == "baseline":
                base_acc = acc
                base_id = spec.experiment_id
                base_state = {p.name: p.data.copy() for p in result.model.parameters()}
            rows.append(ResultsRow(
                experiment_id=spec.experiment_id, mode=spec.model.mode,
                start_layer=spec.model.start_layer, fraction=_dropped_fraction(spec),
                val_acc=acc, rel_score=acc / base_acc,
                flops_reduction=analytic_reduction(spec), steps=spec.steps, seed=seed))
            timings.append(f"{spec.experiment_id}: {result.duration_s:.1f} s, final val_acc {acc:.4f}")
            if log:
                log(f"[{arm} seed={seed}] val_acc {acc:.4f} rel {acc / base_acc:.4f}")
    report = {
        "kind": "comparison_suite",
        "seeds": list(seeds),
        "arms": {name: s.to_dict() for name, s in arms.items()},
        "arm_hashes": {name: s.config_hash for name, s in arms.items()},
        "rows": [r.as_dict() for r in rows],
    }
    total_s = time.perf_counter() - t0
    lines = ["# Token-reduction comparison", "",
             "Four arms per seed: the full stack, proxy tokens from the midpoint layer,",
             "stride-2 uniform pruning (keeps 1/4 of the cells), and 2x2 mean pooling.",
             "The baseline is trained from scratch; the other arms finetune its",
             "weights. Relative scores divide by the same-seed baseline.", "",
             "| arm | seed | mode | fraction dropped | val acc | relative | FLOPs saved |",
             "|---|---:|---|---:|---:|---:|---:|"]
    for r in rows:
        arm = r.experiment_id.split("-s")[0]
        lines.append(f"| {arm} | {r.seed} | {r.mode} | {r.fraction:.2f} | {r.val_acc:.4f} | "
                     f"{r.rel_score:.4f} | {100 * r.flops_reduction:.1f}% |")
    lines += ["", f"Total wall time: {total_s:.0f} s", ""]
    lines += [f"- {t}" for t in timings]
    write_outputs(out_dir, rows, report, "\n".join(lines) + "\n")
    return rows
