"""Analytical multiply-accumulate cost model for the decoder stack.

All counts are exact integers over matrix products only, plus the one
MAC-equivalent-per-element grid pooling charge; normalization, softmax,
rotary rotation, embeddings, the output head, and every other elementwise op
are excluded. FLOPs = 2 * MACs throughout. The per-layer formulas mirror the
runtime kernels one for one, so an instrumented forward pass of a layer must
reproduce layer_macs() exactly - tests enforce equality, not tolerance.

Per layer, with n = vision + proxy + text (text includes separators),
d = width, f = ffn_width:

  baseline     4*n*d^2 + 2*n^2*d + 3*n*d*f
  attn_skip    baseline - n_v*d^2 (vision q-proj) - 2*n_v*n*d (vision-query scores)
  light_mlp    attn_skip - n_v*d^2 (vision o-proj) - 3*n_v*d*f (vision FFN)
                         + n_v*(d*h' + h'^2 + h'*d)
  proxyv_*     q/o-proj on (n_p + n_t), k/v-proj on n, scores 2*(n_p+n_t)*n*d,
               FFN 3*(n_p+n_t)*d*f, guided update n_v*(2*d*h + 2*h^2 + h*d),
               spatial adds the n_v*d pooling charge, non-spatial adds
               n_v*d*d_q + n_p*n_v*d_q/G + 2*n_p*n_v*d/G for G grid groups
               (the mixing logits are computed once and reused by the splat).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .modes import LayerMode, suffix_schedule


@dataclass(frozen=True)
class ArchSpec:
    """Decoder extents plus the added-module extents hanging off it."""

    layers: int
    width: int
    heads: int
    ffn_width: int
    light_hidden: int
    update_hidden: int
    query_dim: int

    def __post_init__(self):
        for name in ("layers", "width", "heads", "ffn_width", "light_hidden", "update_hidden", "query_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class TokenCounts:
    """Token counts for one layer; text includes separators. grids is the
    number of grid groups the vision tokens split into (1 = no structure)."""

    vision: int
    proxy: int
    text: int
    grids: int = 1

    def __post_init__(self):
        if self.vision < 1 or self.text < 1 or self.proxy < 0 or self.grids < 1:
            raise ConfigError(f"bad token counts: {self}")
        if self.vision % self.grids != 0 or (self.proxy and self.proxy % self.grids != 0):
            raise ConfigError(f"counts not divisible into {self.grids} grid groups: {self}")

    @property
    def total(self) -> int:
        return self.vision + self.proxy + self.text


@dataclass(frozen=True)
class LayerMacs:
    """Exact per-layer MAC breakdown; `extra` is the added-module cost."""

    mode: LayerMode
    q_proj: int
    k_proj: int
    v_proj: int
    o_proj: int
    scores: int
    ffn: int
    extra: int

    @property
    def total(self) -> int:
        return self.q_proj + self.k_proj + self.v_proj + self.o_proj + self.scores + self.ffn + self.extra

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "q_proj": self.q_proj,
            "k_proj": self.k_proj,
            "v_proj": self.v_proj,
            "o_proj": self.o_proj,
            "scores": self.scores,
            "ffn": self.ffn,
            "extra": self.extra,
            "total": self.total,
        }


def params_light_mlp(width: int, hidden: int) -> int:
    """Parameter count of the 3-matrix vision MLP (no biases anywhere)."""
    return width * hidden + hidden * hidden + hidden * width


def params_guided_update(width: int, hidden: int) -> int:
    """Two d->h down-projections, 2h->h mix, h->d out."""
    return 2 * width * hidden + 2 * hidden * hidden + hidden * width


def params_nonspatial(width: int, query_dim: int, proxy_count: int) -> int:
    """Learned queries plus the key projection."""
    return proxy_count * query_dim + width * query_dim


def layer_macs(mode: LayerMode, counts: TokenCounts, arch: ArchSpec) -> LayerMacs:
    """Exact MACs of one decoder layer under `mode`."""
    if mode.uses_proxies and counts.proxy == 0:
        raise ConfigError(f"{mode.value} layer needs a positive proxy count")
    if not mode.uses_proxies and counts.proxy != 0:
        raise ConfigError(f"{mode.value} layer must have zero proxies, got {counts.proxy}")
    d, f = arch.width, arch.ffn_width
    nv, np_, nt = counts.vision, counts.proxy, counts.text
    n = counts.total

    if mode == LayerMode.BASELINE:
        return LayerMacs(mode, n * d * d, n * d * d, n * d * d, n * d * d, 2 * n * n * d, 3 * n * d * f, 0)
    if mode == LayerMode.ATTN_SKIP:
        return LayerMacs(mode, nt * d * d, n * d * d, n * d * d, n * d * d, 2 * nt * n * d, 3 * n * d * f, 0)
    if mode == LayerMode.LIGHT_MLP:
        h = arch.light_hidden
        return LayerMacs(
            mode, nt * d * d, n * d * d, n * d * d, nt * d * d, 2 * nt * n * d, 3 * nt * d * f,
            nv * params_light_mlp(d, h),
        )

    # proxy modes: q/o and FFN on proxies+text, k/v on everyone
    h = arch.update_hidden
    nq = np_ + nt
    guided = nv * params_guided_update(d, h)
    if mode == LayerMode.PROXYV_SPATIAL:
        extra = guided + nv * d  # pooling charge
    else:
        g = counts.grids
        extra = guided + nv * d * arch.query_dim + np_ * nv * arch.query_dim // g + 2 * np_ * nv * d // g
    return LayerMacs(mode, nq * d * d, n * d * d, n * d * d, nq * d * d, 2 * nq * n * d, 3 * nq * d * f, extra)


def masked_layer_macs(counts: TokenCounts, arch: ArchSpec) -> LayerMacs:
    """Baseline layer evaluated with its vision attention update masked off.

    Keys/values still cover every token; queries, scores, and the output
    projection run on text rows only. The FFN is untouched."""
    if counts.proxy != 0:
        raise ConfigError(f"masked baseline layer must have zero proxies, got {counts.proxy}")
    d, f = arch.width, arch.ffn_width
    nt, n = counts.text, counts.total
    return LayerMacs(LayerMode.BASELINE, nt * d * d, n * d * d, n * d * d,
                     nt * d * d, 2 * nt * n * d, 3 * n * d * f, 0)


def masking_reduction(layers: int, masked: int, counts: TokenCounts, arch: ArchSpec) -> float:
    """Fractional MAC saving when the last `masked` of `layers` run masked."""
    if not 0 <= masked <= layers:
        raise ConfigError(f"masked layer count {masked} outside [0, {layers}]")
    base = layer_macs(LayerMode.BASELINE, counts, arch).total
    return (base - masked_layer_macs(counts, arch).total) * masked / (base * layers)


def layer_added_params(mode: LayerMode, counts: TokenCounts, arch: ArchSpec) -> int:
    """Parameters a layer carries beyond the baseline decoder layer."""
    if mode == LayerMode.LIGHT_MLP:
        return params_light_mlp(arch.width, arch.light_hidden)
    if mode == LayerMode.PROXYV_SPATIAL:
        return params_guided_update(arch.width, arch.update_hidden)
    if mode == LayerMode.PROXYV_NONSPATIAL:
        per_grid_proxies = counts.proxy // counts.grids
        return params_guided_update(arch.width, arch.update_hidden) + params_nonspatial(
            arch.width, arch.query_dim, per_grid_proxies
        )
    return 0


# ---- whole-stack reports ----


@dataclass
class CostReport:
    arch: ArchSpec
    schedule: tuple[LayerMode, ...]
    per_layer: list[LayerMacs]
    baseline_counts: TokenCounts
    total_macs: int = field(init=False)
    baseline_macs: int = field(init=False)
    added_params: int = 0

    def __post_init__(self):
        self.total_macs = sum(lm.total for lm in self.per_layer)
        base = layer_macs(LayerMode.BASELINE, self.baseline_counts, self.arch)
        self.baseline_macs = self.arch.layers * base.total

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    @property
    def baseline_flops(self) -> int:
        return 2 * self.baseline_macs

    @property
    def reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.total_macs / self.baseline_macs)

    def as_dict(self) -> dict:
        return {
            "arch": self.arch.__dict__,
            "schedule": [m.value for m in self.schedule],
            "per_layer": [lm.as_dict() for lm in self.per_layer],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "baseline_macs": self.baseline_macs,
            "baseline_flops": self.baseline_flops,
            "reduction_percent": self.reduction_percent,
            "added_params": self.added_params,
        }

    def render(self) -> str:
        lines = [
            f"{'layer':>5}  {'mode':<18} {'q_proj':>14} {'k_proj':>14} {'v_proj':>14} "
            f"{'o_proj':>14} {'scores':>14} {'ffn':>14} {'extra':>14} {'total':>15}"
        ]
        for i, lm in enumerate(self.per_layer):
            lines.append(
                f"{i:>5}  {lm.mode.value:<18} {lm.q_proj:>14} {lm.k_proj:>14} {lm.v_proj:>14} "
                f"{lm.o_proj:>14} {lm.scores:>14} {lm.ffn:>14} {lm.extra:>14} {lm.total:>15}"
            )
        lines.append(f"total MACs  {self.total_macs}  (FLOPs {self.total_flops})")
        lines.append(f"baseline MACs  {self.baseline_macs}  (FLOPs {self.baseline_flops})")
        lines.append(f"FLOPs reduction  {self.reduction_percent:.2f}%")
        lines.append(f"added parameters  {self.added_params}")
        return "\n".join(lines)


def model_report(
    schedule: tuple[LayerMode, ...] | list[LayerMode],
    counts: TokenCounts | list[TokenCounts],
    arch: ArchSpec,
    baseline_counts: TokenCounts | None = None,
) -> CostReport:
    """Sum layer_macs over a schedule; reduction is taken against an
    all-baseline stack at `baseline_counts` (defaults to the first layer's
    counts with proxies stripped)."""
    schedule = tuple(schedule)
    if len(schedule) != arch.layers:
        raise ConfigError(f"schedule length {len(schedule)} does not match {arch.layers} layers")
    per_counts = list(counts) if isinstance(counts, list) else [counts] * arch.layers
    if len(per_counts) != arch.layers:
        raise ConfigError(f"counts list length {len(per_counts)} does not match {arch.layers} layers")
    per_layer = [layer_macs(m, c, arch) for m, c in zip(schedule, per_counts)]
    if baseline_counts is None:
        c0 = per_counts[0]
        baseline_counts = TokenCounts(c0.vision, 0, c0.text, c0.grids)
    added = sum(layer_added_params(m, c, arch) for m, c in zip(schedule, per_counts))
    return CostReport(arch, schedule, per_layer, baseline_counts, added_params=added)


def counts_for_schedule(schedule, vision: int | list[int], text: int, grids: int, proxy_count: int) -> list[TokenCounts]:
    """Per-layer TokenCounts with proxies present only on proxy-mode layers."""
    vis = vision if isinstance(vision, list) else [vision] * len(schedule)
    if len(vis) != len(schedule):
        raise ConfigError(f"per-layer vision counts {len(vis)} do not match schedule {len(schedule)}")
    return [TokenCounts(v, proxy_count if m.uses_proxies else 0, text, grids) for m, v in zip(schedule, vis)]


def token_reduction_schedule(kind: str, layers: int, vision: int, grids: int = 1, **kw) -> list[int]:
    """Per-layer vision-token counts under an external token-reduction method.

    kind "none": constant. kind "visionzip": dominant+contextual kept per grid,
    constant across layers. kind "pyramiddrop": count multiplies by `ratio`
    from each layer in `drop_layers` onward (the listed layer itself already
    sees the reduced count).
    """
    if kind == "none":
        return [vision] * layers
    if kind == "visionzip":
        dominant, contextual = kw["dominant"], kw["contextual"]
        if dominant < 1 or contextual < 0:
            raise ConfigError(f"visionzip keeps must be positive: dominant={dominant}, contextual={contextual}")
        return [grids * (dominant + contextual)] * layers
    if kind == "pyramiddrop":
        drop_layers = sorted(kw["drop_layers"])
        ratio = kw.get("ratio", 0.5)
        if not 0 < ratio < 1:
            raise ConfigError(f"drop ratio must lie in (0, 1), got {ratio}")
        if any(not 0 < dl < layers for dl in drop_layers):
            raise ConfigError(f"drop layers {drop_layers} outside (0, {layers})")
        out, cur = [], vision
        for i in range(layers):
            if i in drop_layers:
                cur = int(round(cur * ratio))
            out.append(cur)
        return out
    raise ConfigError(f"unknown token reduction kind {kind!r}; expected none, visionzip, or pyramiddrop")


def combined_report(
    arch: ArchSpec,
    vision: int,
    text: int,
    grids: int,
    mode: LayerMode,
    start_layer: int,
    proxy_count: int,
    reduction_kind: str = "none",
    proxy_grids: int | None = None,
    **reduction_kw,
) -> CostReport:
    """Token reduction composed with a proxy suffix schedule.

    The reduction baseline is always the unreduced all-baseline stack. When a
    reduction other than "none" is active the grid structure is treated as
    destroyed, so non-spatial generation runs globally unless `proxy_grids`
    says otherwise.
    """
    schedule = suffix_schedule(arch.layers, mode, start_layer)
    vis = token_reduction_schedule(reduction_kind, arch.layers, vision, grids, **reduction_kw)
    if proxy_grids is None:
        proxy_grids = grids if reduction_kind == "none" else 1
    counts = counts_for_schedule(schedule, vis, text, proxy_grids, proxy_count)
    baseline = TokenCounts(vision, 0, text, grids)
    report = model_report(schedule, counts, arch, baseline_counts=baseline)
    return report


# ---- published reference figures ----

VICUNA_7B = ArchSpec(layers=32, width=4096, heads=32, ffn_width=11008,
                     light_hidden=1024, update_hidden=1024, query_dim=1024)

# five 24x24 grids plus 50 text tokens and 5 separators; spatial factor 4
FIVE_GRID_VISION = 2880
FIVE_GRID_TEXT = 55
FIVE_GRIDS = 5
FIVE_GRID_PROXIES = 180


@dataclass(frozen=True)
class SuiteRow:
    label: str
    expected_percent: float
    tolerance_pp: float
    actual_percent: float

    @property
    def passed(self) -> bool:
        return abs(self.actual_percent - self.expected_percent) <= self.tolerance_pp


def reference_suite() -> list[SuiteRow]:
    """Reproduce the published FLOPs-reduction figures for the 7B scenario."""
    a = VICUNA_7B
    v, t, g, p = FIVE_GRID_VISION, FIVE_GRID_TEXT, FIVE_GRIDS, FIVE_GRID_PROXIES

    def pct(mode, start):
        proxies = p if mode.uses_proxies else 0
        schedule = suffix_schedule(a.layers, mode, start)
        counts = counts_for_schedule(schedule, v, t, g, proxies)
        return model_report(schedule, counts, a).reduction_percent

    rows = [
        SuiteRow("attention-skip from layer 0", 18, 2, pct(LayerMode.ATTN_SKIP, 0)),
        SuiteRow("attention-skip from layer 12", 11, 2, pct(LayerMode.ATTN_SKIP, 12)),
        SuiteRow("attention-skip from layer 16", 9, 2, pct(LayerMode.ATTN_SKIP, 16)),
        SuiteRow("light-mlp from layer 0", 80, 2, pct(LayerMode.LIGHT_MLP, 0)),
        SuiteRow("light-mlp from layer 12", 50, 2, pct(LayerMode.LIGHT_MLP, 12)),
        SuiteRow("light-mlp from layer 16", 40, 2, pct(LayerMode.LIGHT_MLP, 16)),
        SuiteRow("proxy spatial from layer 0", 73, 3, pct(LayerMode.PROXYV_SPATIAL, 0)),
        SuiteRow("proxy spatial from layer 12", 46, 3, pct(LayerMode.PROXYV_SPATIAL, 12)),
        SuiteRow("proxy spatial from layer 16", 36, 3, pct(LayerMode.PROXYV_SPATIAL, 16)),
        SuiteRow(
            "visionzip 360+40 per grid", 32, 3,
            combined_report(a, v, t, g, LayerMode.BASELINE, a.layers, 0,
                            reduction_kind="visionzip", dominant=360, contextual=40).reduction_percent,
        ),
        SuiteRow(
            "pyramiddrop 50% at 12/20/26", 42, 3,
            combined_report(a, v, t, g, LayerMode.BASELINE, a.layers, 0,
                            reduction_kind="pyramiddrop", drop_layers=[12, 20, 26]).reduction_percent,
        ),
        SuiteRow("proxy non-spatial from layer 12", 44, 4, pct(LayerMode.PROXYV_NONSPATIAL, 12)),
        SuiteRow(
            "visionzip + proxy non-spatial from layer 12", 62, 4,
            combined_report(a, v, t, g, LayerMode.PROXYV_NONSPATIAL, 12, p,
                            reduction_kind="visionzip", dominant=360, contextual=40).reduction_percent,
        ),
    ]
    return rows


def render_suite(rows: list[SuiteRow]) -> str:
    lines = [f"{'figure':<46} {'expected':>9} {'actual':>8} {'tol':>5}  verdict"]
    for r in rows:
        lines.append(
            f"{r.label:<46} {r.expected_percent:>8.0f}% {r.actual_percent:>7.2f}% {r.tolerance_pp:>4.0f}p  "
            + ("PASS" if r.passed else "FAIL")
        )
    n_pass = sum(r.passed for r in rows)
    lines.append(f"{n_pass}/{len(rows)} PASS")
    return "\n".join(lines)
