"""Token layout, attention masks, and multi-head attention over index sets.

Sequences follow one fixed ordering: for each grid, its vision tokens in
raster order followed by one separator, then the text tokens. Masks are dense
boolean matrices (row = query, column = key, True = permitted) so every
regime, including the vision-masked ablation, is a plain matrix edit. Rotary
positions are the ordering indices, so inserted proxy tokens shift positions
of everything after them inside their layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import SeededRng
from .tensor import Parameter, Tensor, bmm, linear, reshape, rms_norm, rope_rotate, rope_tables, softmax, transpose
from .tensor import add_const, mul_const, take_rows


class Role(IntEnum):
    VISION = 0
    SEPARATOR = 1
    TEXT = 2


@dataclass(frozen=True)
class TokenLayout:
    """Per-token roles and grid coordinates for one sequence template.

    roles/grid_id/row/col are (n,) arrays; row/col/grid_id are -1 off-grid.
    The ordering index of token i is simply i.
    """

    roles: np.ndarray
    grid_id: np.ndarray
    row: np.ndarray
    col: np.ndarray
    grids: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        n = len(self.roles)
        for name in ("grid_id", "row", "col"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"layout field {name} has length {len(getattr(self, name))}, expected {n}")
        for g in range(self.grids):
            rows = np.flatnonzero((self.roles == Role.VISION) & (self.grid_id == g))
            if rows.size == 0:
                raise ConfigError(f"grid {g} has no vision tokens")
            raster = self.row[rows] * self.grid_cols + self.col[rows]
            if not np.array_equal(raster, np.sort(raster)) or not np.array_equal(rows, np.arange(rows[0], rows[0] + rows.size)):
                raise ConfigError(f"grid {g} vision tokens are not contiguous in raster order")

    @property
    def n(self) -> int:
        return len(self.roles)

    @property
    def vision_rows(self) -> np.ndarray:
        return np.flatnonzero(self.roles == Role.VISION)

    @property
    def textlike_rows(self) -> np.ndarray:
        """Text plus separators; separators follow the text path everywhere."""
        return np.flatnonzero(self.roles != Role.VISION)

    @property
    def text_rows(self) -> np.ndarray:
        return np.flatnonzero(self.roles == Role.TEXT)

    def grid_vision_rows(self, g: int) -> np.ndarray:
        return np.flatnonzero((self.roles == Role.VISION) & (self.grid_id == g))


def build_layout(grids: int, grid_rows: int, grid_cols: int, n_text: int) -> TokenLayout:
    """[grid 0 vision raster, sep, grid 1 vision raster, sep, ..., text]."""
    if grids < 1 or grid_rows < 1 or grid_cols < 1 or n_text < 1:
        raise ConfigError(f"layout extents must be positive: grids={grids}, rows={grid_rows}, cols={grid_cols}, text={n_text}")
    roles, gid, row, col = [], [], [], []
    for g in range(grids):
        for r in range(grid_rows):
            for c in range(grid_cols):
                roles.append(Role.VISION)
                gid.append(g)
                row.append(r)
                col.append(c)
        roles.append(Role.SEPARATOR)
        gid.append(-1)
        row.append(-1)
        col.append(-1)
    roles += [Role.TEXT] * n_text
    gid += [-1] * n_text
    row += [-1] * n_text
    col += [-1] * n_text
    return TokenLayout(
        roles=np.array(roles, dtype=np.int8),
        grid_id=np.array(gid, dtype=np.int16),
        row=np.array(row, dtype=np.int16),
        col=np.array(col, dtype=np.int16),
        grids=grids,
        grid_rows=grid_rows,
        grid_cols=grid_cols,
    )


# ---- Masks ----


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular permission matrix; every query keeps its diagonal."""
    return np.tril(np.ones((n, n), dtype=bool))


def vision_masked_mask(layout: TokenLayout, allow_preceding_text: bool = True) -> np.ndarray:
    """Causal mask with vision-to-vision attention removed.

    A vision query keeps its own diagonal and, by default, any preceding
    text/separator keys; `allow_preceding_text=False` is the stricter variant
    that leaves vision queries with the diagonal only. Text and separator
    queries are untouched. No row is ever empty.
    """
    m = causal_mask(layout.n)
    vis = layout.roles == Role.VISION
    block = np.outer(vis, vis)
    np.fill_diagonal(block, False)
    m &= ~block
    if not allow_preceding_text:
        off_diag = ~np.eye(layout.n, dtype=bool)
        m &= ~(vis[:, None] & off_diag)
    return m


def partial_mask(layout: TokenLayout, layers: int, fraction: float) -> list[np.ndarray | None]:
    """Per-layer schedule: the last ceil(fraction * layers) layers get the
    vision-masked mask, earlier layers None (plain causal)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"mask fraction must lie in [0, 1], got {fraction}")
    masked = math.ceil(fraction * layers)
    start = layers - masked
    vm = vision_masked_mask(layout)
    return [vm if i >= start else None for i in range(layers)]


def additive_mask(mask: np.ndarray, dtype) -> np.ndarray:
    """bool (nq, nk) -> 0 where permitted, -inf where forbidden."""
    out = np.zeros(mask.shape, dtype=dtype)
    out[~mask] = -np.inf
    return out


# ---- Attention ----


@dataclass
class AttentionParams:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    heads: int

    @staticmethod
    def create(prefix: str, width: int, heads: int, rng: SeededRng, std: float = 0.02, dtype=np.float32) -> "AttentionParams":
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        mk = lambda nm: Parameter(f"{prefix}.{nm}", rng.normal((width, width), std, dtype))
        return AttentionParams(mk("wq"), mk("wk"), mk("wv"), mk("wo"), heads)

    @property
    def head_dim(self) -> int:
        return self.wq.data.shape[0] // self.heads


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, n, d) -> (B, heads, n, d/heads)."""
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, n, dh) -> (B, n, d)."""
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray,
    pos_q: np.ndarray,
    pos_k: np.ndarray,
    heads: int,
    rope_base: float = 10000.0,
) -> Tensor:
    """Scaled dot-product attention before the output projection.

    q (B, nq, d), k/v (B, nk, d), mask bool (nq, nk) -> (B, nq, d).
    Rotary rotation uses the given integer positions; scale is 1/sqrt(d/heads).
    """
    if q.shape[0] != k.shape[0] or k.shape != v.shape or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention_core: q {q.shape}, k {k.shape}, v {v.shape}")
    if mask.shape != (q.shape[1], k.shape[1]):
        raise ShapeError(f"attention_core: mask {mask.shape} does not match ({q.shape[1]}, {k.shape[1]})")
    if not mask.any(axis=1).all():
        raise ShapeError("attention_core: a query row permits no keys")
    dh = q.shape[2] // heads
    dtype = q.dtype
    cos_q, sin_q = rope_tables(pos_q, dh, rope_base, dtype)
    cos_k, sin_k = rope_tables(pos_k, dh, rope_base, dtype)
    qh = rope_rotate(split_heads(q, heads), cos_q, sin_q)
    kh = rope_rotate(split_heads(k, heads), cos_k, sin_k)
    vh = split_heads(v, heads)
    scores = mul_const(bmm(qh, transpose(kh, (0, 1, 3, 2))), np.asarray(1.0 / math.sqrt(dh), dtype=dtype))
    scores = add_const(scores, additive_mask(mask, dtype))
    return merge_heads(bmm(softmax(scores, axis=-1), vh))


def mha(
    x: Tensor,
    params: AttentionParams,
    q_rows: np.ndarray,
    kv_rows: np.ndarray,
    mask: np.ndarray,
    positions: np.ndarray,
    rope_base: float = 10000.0,
) -> Tensor:
    """Full attention op over index sets: project, attend, output-project.

    x (B, n, d) already normalized; mask is the full (n, n) permission matrix,
    restricted here to q_rows x kv_rows. Returns (B, len(q_rows), d).
    """
    q_rows = np.asarray(q_rows, dtype=np.int64)
    kv_rows = np.asarray(kv_rows, dtype=np.int64)
    q = linear(take_rows(x, q_rows), params.wq)
    k = linear(take_rows(x, kv_rows), params.wk)
    v = linear(take_rows(x, kv_rows), params.wv)
    sub = mask[np.ix_(q_rows, kv_rows)]
    att = attention_core(q, k, v, sub, positions[q_rows], positions[kv_rows], params.heads, rope_base)
    return linear(att, params.wo)


def vision_skip_update(x_vision: Tensor, params: AttentionParams, norm_gain: Parameter | None = None, eps: float = 1e-5) -> Tensor:
    """W_o(W_v(x)) update for vision tokens that skip attention.

    Normalization is applied when a gain is given; the caller adds the residual.
    """
    x = x_vision if norm_gain is None else rms_norm(x_vision, norm_gain, eps)
    return linear(linear(x, params.wv), params.wo)
