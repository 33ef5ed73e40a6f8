"""Decoder stack with five per-layer regimes and exact cost-model parity.

A layer runs in one of five modes: the ordinary dense layer; attention skip,
where vision tokens stop issuing queries and are updated by their own value
and output projections; light MLP, where vision tokens are updated only by a
small three-matrix MLP at the FFN position; and the two proxy modes, where a
handful of proxy tokens (pooled thumbnails or learned mixtures) join the
sequence for the layer, do the heavy attention and FFN work, and hand their
result back to the vision tokens through a zero-initialized guided update.

Every matrix product in these layers is one of the tallied kernels, and the
terms line up one for one with costs.layer_macs, so an instrumented forward
pass of any layer reproduces the analytical count exactly (tests assert
equality, not tolerance). Proxy insertion happens inside the layer by
default; with `proxy_persistence` the proxies from the first proxy layer
stay in the sequence and later layers reuse them instead of regenerating.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    Role,
    TokenLayout,
    attention_core,
    build_layout,
    causal_mask,
    mha,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .modes import LayerMode, parse_mode, suffix_schedule
from .proxy import (
    GuidedUpdateParams,
    NonSpatialProxyParams,
    SpatialProxyConfig,
    correspondence,
    downsample_spatial,
    guided_update,
    guided_update_from_aligned,
    nonspatial_generate,
    nonspatial_splat,
)
from .rng import SeededRng
from .tensor import (
    Parameter,
    Tensor,
    concat,
    embed,
    gated_ffn,
    linear,
    rms_norm,
    scatter_rows,
    silu,
    take_rows,
    transpose,
)
from .costs import ArchSpec


# ---- configuration ----


_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Extents and regime for one decoder stack.

    `mode` applies from `start_layer` on; earlier layers are baseline.
    `grid_side` is the default vision grid edge; forward calls may pass other
    geometries (pruned or pooled grids) as long as spatial proxy layers still
    divide evenly. Non-spatial proxy counts are a parameter of the model, so
    they stay fixed regardless of runtime geometry.
    """

    layers: int = 8
    width: int = 128
    heads: int = 4
    ffn_width: int = 384
    vocab: int = 64
    grids: int = 1
    grid_side: int = 8
    downsample_factor: int = 2
    light_hidden: int = 32
    update_hidden: int = 32
    query_dim: int = 32
    nonspatial_proxies: int | None = None
    mode: str = "baseline"
    start_layer: int = 0
    proxy_persistence: bool = False
    tied_head: bool = False
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("layers", "width", "heads", "ffn_width", "vocab", "grids",
                     "grid_side", "downsample_factor", "light_hidden", "update_hidden", "query_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 2 != 0:
            raise ConfigError(f"head dim {self.width // self.heads} must be even for rotary pairs")
        mode = parse_mode(self.mode)
        if not 0 <= self.start_layer <= self.layers:
            raise ConfigError(f"start_layer {self.start_layer} outside [0, {self.layers}]")
        if mode == LayerMode.PROXYV_SPATIAL and self.grid_side % self.downsample_factor != 0:
            raise ConfigError(f"grid side {self.grid_side} not divisible by factor {self.downsample_factor}")
        if self.proxy_persistence and mode != LayerMode.PROXYV_SPATIAL:
            raise ConfigError("proxy_persistence requires mode proxyv_spatial; "
                              "non-spatial proxies are regenerated per layer by construction")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.nonspatial_proxies is not None and self.nonspatial_proxies < 1:
            raise ConfigError(f"nonspatial_proxies must be positive, got {self.nonspatial_proxies}")

    @property
    def layer_modes(self) -> tuple[LayerMode, ...]:
        return suffix_schedule(self.layers, parse_mode(self.mode), self.start_layer)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def proxies_per_grid(self) -> int:
        """m for non-spatial layers; spatial layers derive theirs from geometry."""
        if self.nonspatial_proxies is not None:
            return self.nonspatial_proxies
        return (self.grid_side // self.downsample_factor) ** 2

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(self.layers, self.width, self.heads, self.ffn_width,
                        self.light_hidden, self.update_hidden, self.query_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return ModelConfig(**d)


# ---- layer parameters ----


@dataclass
class LightMlpParams:
    """Three-matrix vision MLP: d -> h -> h -> d with silu between, zero-init out."""

    w1: Parameter
    w2: Parameter
    w3: Parameter

    @staticmethod
    def create(prefix: str, width: int, hidden: int, rng: SeededRng, std: float = 0.02, dtype=np.float32) -> "LightMlpParams":
        return LightMlpParams(
            w1=Parameter(f"{prefix}.w1", rng.normal((width, hidden), std, dtype)),
            w2=Parameter(f"{prefix}.w2", rng.normal((hidden, hidden), std, dtype)),
            w3=Parameter(f"{prefix}.w3", np.zeros((hidden, width), dtype=dtype)),
        )


def light_mlp(x: Tensor, params: LightMlpParams) -> Tensor:
    """(..., n_v, d) -> (..., n_v, d); the caller adds the residual."""
    return linear(silu(linear(silu(linear(x, params.w1)), params.w2)), params.w3)


@dataclass
class LayerParams:
    attn: AttentionParams
    norm1: Parameter
    norm2: Parameter
    ffn_gate: Parameter
    ffn_up: Parameter
    ffn_down: Parameter
    light: LightMlpParams | None = None
    guided: GuidedUpdateParams | None = None
    nonspatial: NonSpatialProxyParams | None = None


# ---- cached sequence structure ----


@dataclass
class ExtStructure:
    """Extended (proxy-inserted) ordering for one base layout.

    `perm` maps extended position -> index into the virtual concatenation
    [base tokens | proxy tokens], with each grid's proxies placed right after
    its vision block and before its separator. Positions are the extended
    ordering indices, so everything after an insertion shifts.
    """

    n: int
    perm: np.ndarray
    positions: np.ndarray
    causal: np.ndarray
    q_rows: np.ndarray
    vis_rows: np.ndarray
    prox_rows: np.ndarray
    base_rows: np.ndarray
    proxies_per_grid: int
    corr: np.ndarray | None


@dataclass
class SeqStructure:
    """Everything shape-derived that layers reuse across batches."""

    layout: TokenLayout
    positions: np.ndarray
    causal: np.ndarray
    tx_rows: np.ndarray
    vis_rows: np.ndarray
    ext: ExtStructure | None = None
    grid_slices: list[np.ndarray] = field(default_factory=list)


def _extend_layout(layout: TokenLayout, proxies_per_grid: int, corr: np.ndarray | None) -> ExtStructure:
    n, m = layout.n, proxies_per_grid
    order: list[int] = []
    for g in range(layout.grids):
        rows = layout.grid_vision_rows(g)
        order.extend(rows.tolist())
        order.extend(range(n + g * m, n + (g + 1) * m))
        order.append(int(rows[-1]) + 1)  # the separator right after the grid
    order.extend(np.flatnonzero(layout.roles == Role.TEXT).tolist())
    perm = np.array(order, dtype=np.int64)
    n_ext = n + layout.grids * m
    if perm.size != n_ext:
        raise ShapeError(f"extended ordering covers {perm.size} rows, expected {n_ext}")
    inv = np.empty(n_ext, dtype=np.int64)
    inv[perm] = np.arange(n_ext)
    src_is_vision = np.zeros(n_ext, dtype=bool)
    src_is_vision[perm < n] = layout.roles[perm[perm < n]] == Role.VISION
    return ExtStructure(
        n=n_ext,
        perm=perm,
        positions=np.arange(n_ext),
        causal=causal_mask(n_ext),
        q_rows=np.flatnonzero(~src_is_vision),
        vis_rows=np.flatnonzero(src_is_vision),
        prox_rows=inv[n:],
        base_rows=inv[:n],
        proxies_per_grid=m,
        corr=corr,
    )


# ---- the model ----


class Model:
    """Token embedding, a stack of per-mode layers, final norm, output head.

    Parameters are created in a fixed order from a seeded generator, so the
    same (config, seed) always yields the same initialization. Structures
    (layouts, masks, orderings) are cached per sequence geometry.
    """

    def __init__(self, config: ModelConfig, seed: int | SeededRng = 0):
        self.config = config
        rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
        init = rng.child("init")
        d, dt, std = config.width, config.np_dtype, config.init_std
        self.token_emb = Parameter("token_emb", init.normal((config.vocab, d), std, dt))
        self.layers: list[LayerParams] = []
        for i, mode in enumerate(config.layer_modes):
            lp = LayerParams(
                attn=AttentionParams.create(f"layers.{i}.attn", d, config.heads, init, std, dt),
                norm1=Parameter(f"layers.{i}.norm1", np.ones(d, dtype=dt)),
                norm2=Parameter(f"layers.{i}.norm2", np.ones(d, dtype=dt)),
                ffn_gate=Parameter(f"layers.{i}.ffn.gate", init.normal((d, config.ffn_width), std, dt)),
                ffn_up=Parameter(f"layers.{i}.ffn.up", init.normal((d, config.ffn_width), std, dt)),
                ffn_down=Parameter(f"layers.{i}.ffn.down", init.normal((config.ffn_width, d), std, dt)),
            )
            if mode == LayerMode.LIGHT_MLP:
                lp.light = LightMlpParams.create(f"layers.{i}.light", d, config.light_hidden, init, std, dt)
            if mode.uses_proxies:
                lp.guided = GuidedUpdateParams.create(f"layers.{i}.guided", d, config.update_hidden, init, std, dt)
            if mode == LayerMode.PROXYV_NONSPATIAL:
                lp.nonspatial = NonSpatialProxyParams.create(
                    f"layers.{i}.nonspatial", d, config.query_dim, config.proxies_per_grid, init, std, dt)
            self.layers.append(lp)
        self.final_norm = Parameter("final_norm", np.ones(d, dtype=dt))
        # tied head reads logits through the token embedding; no extra matrix
        self.head = None if config.tied_head else Parameter("head", init.normal((d, config.vocab), std, dt))
        self._structures: dict[tuple, SeqStructure] = {}

    # -- parameter registry --

    def parameters(self) -> list[Parameter]:
        out = [self.token_emb]
        for lp in self.layers:
            out += [lp.attn.wq, lp.attn.wk, lp.attn.wv, lp.attn.wo, lp.norm1, lp.norm2,
                    lp.ffn_gate, lp.ffn_up, lp.ffn_down]
            if lp.light is not None:
                out += [lp.light.w1, lp.light.w2, lp.light.w3]
            if lp.guided is not None:
                out += [lp.guided.down_full, lp.guided.down_proxy, lp.guided.mix, lp.guided.out]
            if lp.nonspatial is not None:
                out += [lp.nonspatial.queries, lp.nonspatial.key_proj]
        out.append(self.final_norm)
        if self.head is not None:
            out.append(self.head)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Strict by-name assignment; any mismatch raises CheckpointError."""
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in named.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.config.np_dtype)

    # -- structure cache --

    def structure(self, grids: int, grid_rows: int, grid_cols: int, n_text: int) -> SeqStructure:
        key = (grids, grid_rows, grid_cols, n_text)
        st = self._structures.get(key)
        if st is not None:
            return st
        layout = build_layout(grids, grid_rows, grid_cols, n_text)
        st = SeqStructure(
            layout=layout,
            positions=np.arange(layout.n),
            causal=causal_mask(layout.n),
            tx_rows=layout.textlike_rows,
            vis_rows=layout.vision_rows,
            grid_slices=[layout.grid_vision_rows(g) for g in range(grids)],
        )
        modes = self.config.layer_modes
        if any(m.uses_proxies for m in modes):
            if LayerMode.PROXYV_SPATIAL in modes:
                if grid_rows != grid_cols:
                    raise ConfigError(f"spatial proxies need square grids, got {grid_rows}x{grid_cols}")
                cfg = SpatialProxyConfig(grids, grid_rows, self.config.downsample_factor)
                st.ext = _extend_layout(layout, cfg.proxies_per_grid, correspondence(cfg))
            else:
                st.ext = _extend_layout(layout, self.config.proxies_per_grid, None)
        self._structures[key] = st
        return st

    # -- embedding and assembly --

    def encode_vision(self, *id_arrays: np.ndarray) -> Tensor:
        """Sum of embedding lookups, one per id array of shape (B, n_v)."""
        if not id_arrays:
            raise ShapeError("encode_vision needs at least one id array")
        out = embed(self.token_emb, id_arrays[0])
        for ids in id_arrays[1:]:
            out = out + embed(self.token_emb, ids)
        return out

    def assemble(self, vision: Tensor, text_ids: np.ndarray, sep_id: int, st: SeqStructure) -> Tensor:
        """Interleave vision blocks, separators, and text into layout order."""
        layout = st.layout
        b, nv, d = vision.shape
        if nv != st.vis_rows.size:
            raise ShapeError(f"vision rows {nv} do not match layout {st.vis_rows.size}")
        if text_ids.shape != (b, layout.n - nv - layout.grids):
            raise ShapeError(f"text ids {text_ids.shape} do not match layout text {layout.n - nv - layout.grids}")
        sep = embed(self.token_emb, np.full((b, 1), sep_id, dtype=np.int64))
        per = nv // layout.grids
        parts = []
        for g in range(layout.grids):
            parts.append(take_rows(vision, np.arange(g * per, (g + 1) * per)))
            parts.append(sep)
        parts.append(embed(self.token_emb, text_ids))
        return concat(parts, axis=-2)

    # -- per-mode layers --

    def layer_forward(self, x: Tensor, layer: int, st: SeqStructure, mask: np.ndarray | None = None,
                      mask_vision: bool = False) -> Tensor:
        """One decoder layer in its configured mode; x (B, n, d) in base order.

        `mask` overrides the causal permission matrix (base layout only; proxy
        layers reorder the sequence internally and reject overrides).
        `mask_vision` drops the attention update of vision rows for this layer,
        a training-free probe that only makes sense on baseline layers.
        """
        mode = self.config.layer_modes[layer]
        lp = self.layers[layer]
        if mode.uses_proxies:
            if mask is not None:
                raise ConfigError("mask overrides apply to base-layout layers only")
            if mask_vision:
                raise ConfigError("vision-attention masking applies to baseline layers only")
            return self._proxy_layer(x, lp, mode, st, keep_proxies=False)
        m = st.causal if mask is None else mask
        if m.shape != (st.layout.n, st.layout.n):
            raise ShapeError(f"mask {m.shape} does not match layout ({st.layout.n}, {st.layout.n})")
        if mask_vision:
            if mode != LayerMode.BASELINE:
                raise ConfigError(f"vision-attention masking applies to baseline layers only, layer {layer} is {mode.value}")
            return self._masked_vision_layer(x, lp, st, m)
        if mode == LayerMode.BASELINE:
            return self._baseline_layer(x, lp, st, m)
        if mode == LayerMode.ATTN_SKIP:
            return self._attn_skip_layer(x, lp, st, m)
        return self._light_mlp_layer(x, lp, st, m)

    def _baseline_layer(self, x: Tensor, lp: LayerParams, st: SeqStructure, mask: np.ndarray) -> Tensor:
        n = st.layout.n
        rows = np.arange(n)
        att = mha(rms_norm(x, lp.norm1, self.config.norm_eps), lp.attn, rows, rows,
                  mask, st.positions, self.config.rope_base)
        h1 = x + att
        return h1 + gated_ffn(rms_norm(h1, lp.norm2, self.config.norm_eps), lp.ffn_gate, lp.ffn_up, lp.ffn_down)

    def _masked_vision_layer(self, x: Tensor, lp: LayerParams, st: SeqStructure, mask: np.ndarray) -> Tensor:
        """Baseline layer with the vision rows' attention update removed.

        Text rows still read vision keys/values; the FFN runs everywhere.
        Used to probe a trained model for redundant vision attention."""
        cfg = self.config
        n = st.layout.n
        att = mha(rms_norm(x, lp.norm1, cfg.norm_eps), lp.attn, st.tx_rows, np.arange(n),
                  mask, st.positions, cfg.rope_base)
        h1 = x + scatter_rows(att, n, st.tx_rows)
        return h1 + gated_ffn(rms_norm(h1, lp.norm2, cfg.norm_eps), lp.ffn_gate, lp.ffn_up, lp.ffn_down)

    def _attn_skip_layer(self, x: Tensor, lp: LayerParams, st: SeqStructure, mask: np.ndarray) -> Tensor:
        """Vision tokens issue no queries; their update is their own value
        vector through the output projection, sharing the single v/o pass."""
        cfg = self.config
        n = st.layout.n
        xn = rms_norm(x, lp.norm1, cfg.norm_eps)
        q = linear(take_rows(xn, st.tx_rows), lp.attn.wq)
        k = linear(xn, lp.attn.wk)
        v = linear(xn, lp.attn.wv)
        att = attention_core(q, k, v, mask[np.ix_(st.tx_rows, np.arange(n))],
                             st.positions[st.tx_rows], st.positions, lp.attn.heads, cfg.rope_base)
        merged = concat([att, take_rows(v, st.vis_rows)], axis=-2)
        o = linear(merged, lp.attn.wo)
        upd = scatter_rows(take_rows(o, np.arange(st.tx_rows.size)), n, st.tx_rows) \
            + scatter_rows(take_rows(o, st.tx_rows.size + np.arange(st.vis_rows.size)), n, st.vis_rows)
        h1 = x + upd
        return h1 + gated_ffn(rms_norm(h1, lp.norm2, cfg.norm_eps), lp.ffn_gate, lp.ffn_up, lp.ffn_down)

    def _light_mlp_layer(self, x: Tensor, lp: LayerParams, st: SeqStructure, mask: np.ndarray) -> Tensor:
        """Vision tokens serve as keys/values only; a small MLP at the FFN
        position is their whole update."""
        cfg = self.config
        n = st.layout.n
        att = mha(rms_norm(x, lp.norm1, cfg.norm_eps), lp.attn, st.tx_rows, np.arange(n),
                  mask, st.positions, cfg.rope_base)
        h1 = x + scatter_rows(att, n, st.tx_rows)
        x2n = rms_norm(h1, lp.norm2, cfg.norm_eps)
        ffn = gated_ffn(take_rows(x2n, st.tx_rows), lp.ffn_gate, lp.ffn_up, lp.ffn_down)
        vis = light_mlp(take_rows(x2n, st.vis_rows), lp.light)
        return h1 + scatter_rows(ffn, n, st.tx_rows) + scatter_rows(vis, n, st.vis_rows)

    def _make_proxies(self, x: Tensor, lp: LayerParams, mode: LayerMode, st: SeqStructure):
        """Proxies from the residual stream entering the layer.

        Returns (proxies (B, n_p, d), per-grid generation logits or None)."""
        if mode == LayerMode.PROXYV_SPATIAL:
            cfg = SpatialProxyConfig(st.layout.grids, st.layout.grid_rows, self.config.downsample_factor)
            return downsample_spatial(take_rows(x, st.vis_rows), cfg), None
        parts, logits = [], []
        for rows in st.grid_slices:
            p, a = nonspatial_generate(take_rows(x, rows), lp.nonspatial)
            parts.append(p)
            logits.append(a)
        return (parts[0] if len(parts) == 1 else concat(parts, axis=-2)), logits

    def _ext_attention_ffn(self, ext: Tensor, lp: LayerParams, es: ExtStructure) -> Tensor:
        """Attention + FFN on the extended ordering; queries and FFN run on
        proxy and text rows only, keys/values on everyone."""
        cfg = self.config
        xn = rms_norm(ext, lp.norm1, cfg.norm_eps)
        att = mha(xn, lp.attn, es.q_rows, np.arange(es.n), es.causal, es.positions, cfg.rope_base)
        h1 = ext + scatter_rows(att, es.n, es.q_rows)
        ffn = gated_ffn(take_rows(rms_norm(h1, lp.norm2, cfg.norm_eps), es.q_rows),
                        lp.ffn_gate, lp.ffn_up, lp.ffn_down)
        return h1 + scatter_rows(ffn, es.n, es.q_rows)

    def _guided(self, h2: Tensor, lp: LayerParams, mode: LayerMode, st: SeqStructure, gen_logits) -> Tensor:
        """Vision rows updated from post-layer proxy states; (B, n_v, d)."""
        es = st.ext
        prox_post = take_rows(h2, es.prox_rows)
        vis_in = take_rows(h2, es.vis_rows)
        if mode == LayerMode.PROXYV_SPATIAL:
            return guided_update(vis_in, prox_post, es.corr, lp.guided)
        m = es.proxies_per_grid
        splats = []
        for g, a in enumerate(gen_logits):
            pg = take_rows(prox_post, np.arange(g * m, (g + 1) * m))
            splats.append(nonspatial_splat(pg, a))
        aligned = splats[0] if len(splats) == 1 else concat(splats, axis=-2)
        return guided_update_from_aligned(vis_in, aligned, lp.guided)

    def _proxy_layer(self, x: Tensor, lp: LayerParams, mode: LayerMode, st: SeqStructure, keep_proxies: bool) -> Tensor:
        es = st.ext
        prox, gen_logits = self._make_proxies(x, lp, mode, st)
        ext = take_rows(concat([x, prox], axis=-2), es.perm)
        h2 = self._ext_attention_ffn(ext, lp, es)
        vis_new = self._guided(h2, lp, mode, st, gen_logits)
        if keep_proxies:
            kept = take_rows(h2, es.q_rows)
            return scatter_rows(kept, es.n, es.q_rows) + scatter_rows(vis_new, es.n, es.vis_rows)
        n = st.layout.n
        tx_vals = take_rows(h2, es.base_rows[st.tx_rows])
        return scatter_rows(tx_vals, n, st.tx_rows) + scatter_rows(vis_new, n, st.vis_rows)

    def _persistent_layer(self, ext: Tensor, lp: LayerParams, st: SeqStructure) -> Tensor:
        """Later spatial layers under persistence: proxies already in the
        stream are reused (no regeneration charge) and stay there."""
        es = st.ext
        h2 = self._ext_attention_ffn(ext, lp, es)
        vis_new = self._guided(h2, lp, LayerMode.PROXYV_SPATIAL, st, None)
        kept = take_rows(h2, es.q_rows)
        return scatter_rows(kept, es.n, es.q_rows) + scatter_rows(vis_new, es.n, es.vis_rows)

    # -- full forward --

    def forward_prefill(
        self,
        vision: Tensor,
        text_ids: np.ndarray,
        sep_id: int,
        grids: int,
        grid_rows: int,
        grid_cols: int,
        masks: list[np.ndarray | None] | None = None,
        mask_vision: "list[bool] | None" = None,
        answer_rows: np.ndarray | None = None,
    ) -> Tensor:
        """Embed, run every layer, and read logits at answer positions.

        vision (B, n_v, d) embeddings; text_ids (B, n_text). mask_vision is a
        per-layer flag suppressing that layer's vision attention update.
        answer_rows are base-order sequence indices (default: the last text
        token). Returns (B, len(answer_rows), vocab).
        """
        cfg = self.config
        st = self.structure(grids, grid_rows, grid_cols, text_ids.shape[1])
        if masks is not None and len(masks) != cfg.layers:
            raise ConfigError(f"mask schedule length {len(masks)} does not match {cfg.layers} layers")
        if mask_vision is not None and len(mask_vision) != cfg.layers:
            raise ConfigError(f"mask_vision schedule length {len(mask_vision)} does not match {cfg.layers} layers")
        h = self.assemble(vision, text_ids, sep_id, st)
        modes = cfg.layer_modes
        extended = False
        for i, mode in enumerate(modes):
            mask = masks[i] if masks is not None else None
            mv = bool(mask_vision[i]) if mask_vision is not None else False
            if cfg.proxy_persistence and mode.uses_proxies:
                if mask is not None:
                    raise ConfigError("mask overrides apply to base-layout layers only")
                if mv:
                    raise ConfigError("vision-attention masking applies to baseline layers only")
                lp = self.layers[i]
                if not extended:
                    h = self._proxy_layer(h, lp, mode, st, keep_proxies=True)
                    extended = True
                else:
                    h = self._persistent_layer(h, lp, st)
            else:
                h = self.layer_forward(h, i, st, mask, mask_vision=mv)
        if answer_rows is None:
            answer_rows = np.array([st.layout.n - 1])
        rows = np.asarray(answer_rows, dtype=np.int64)
        if extended:
            rows = st.ext.base_rows[rows]
        h = rms_norm(h, self.final_norm, cfg.norm_eps)
        head = transpose(self.token_emb, (1, 0)) if self.head is None else self.head
        return linear(take_rows(h, rows), head)
