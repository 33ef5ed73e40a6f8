"""Proxy vision tokens: spatial thumbnail pooling, the guided-update network
that writes proxy information back into full tokens, and the non-spatial
learned-query variant that reuses its mixing logits for the splat.

Cost accounting notes live next to each op: grid pooling reports one
MAC-equivalent per pooled input element, and the guided update down-projects
the proxies after expansion to full-token rows so runtime MACs match the
analytical per-layer formula term for term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import SeededRng
from .tensor import (
    Parameter,
    Tensor,
    _add_grad,
    _tally,
    bmm,
    concat,
    linear,
    silu,
    softmax,
    take_rows,
    tile_leading,
    transpose,
)


@dataclass(frozen=True)
class SpatialProxyConfig:
    """Downsample geometry: each grid of side N becomes a thumbnail of side N/factor."""

    grids: int
    grid_side: int
    factor: int

    def __post_init__(self):
        if self.grids < 1 or self.grid_side < 1 or self.factor < 1:
            raise ConfigError(f"extents must be positive: {self}")
        if self.grid_side % self.factor != 0:
            raise ConfigError(f"grid side {self.grid_side} not divisible by downsample factor {self.factor}")

    @property
    def proxy_side(self) -> int:
        return self.grid_side // self.factor

    @property
    def proxies_per_grid(self) -> int:
        return self.proxy_side ** 2

    @property
    def tokens_per_grid(self) -> int:
        return self.grid_side ** 2


def grid_pool_mean(x: Tensor, side: int, factor: int) -> Tensor:
    """Mean-pool one raster grid: x (..., side^2, d) -> (..., (side/factor)^2, d).

    Counted as one MAC-equivalent per input element per feature,
    i.e. side^2 * d (times leading batch), matching the analytical model.
    """
    if side % factor != 0:
        raise ConfigError(f"grid side {side} not divisible by factor {factor}")
    if x.shape[-2] != side * side:
        raise ShapeError(f"grid_pool_mean: {x.shape} does not hold a {side}x{side} raster")
    m = side // factor
    lead = x.shape[:-2]
    d = x.shape[-1]
    _tally(int(np.prod(lead, dtype=np.int64)) * side * side * d if lead else side * side * d)
    blocks = x.data.reshape(lead + (m, factor, m, factor, d))
    pooled = blocks.mean(axis=(-4, -2)).reshape(lead + (m * m, d))

    def vjp(g):
        gb = g.reshape(lead + (m, 1, m, 1, d)) / (factor * factor)
        gx = np.broadcast_to(gb, lead + (m, factor, m, factor, d))
        _add_grad(x, gx.reshape(x.shape).copy())

    return Tensor._compose(pooled, (x,), vjp)


def downsample_spatial(x_vision: Tensor, cfg: SpatialProxyConfig) -> Tensor:
    """Pool each grid independently; x (..., grids*side^2, d) -> (..., grids*proxy^2, d)."""
    per = cfg.tokens_per_grid
    if x_vision.shape[-2] != cfg.grids * per:
        raise ShapeError(f"downsample_spatial: {x_vision.shape} does not hold {cfg.grids} grids of {per} tokens")
    if cfg.grids == 1:
        return grid_pool_mean(x_vision, cfg.grid_side, cfg.factor)
    parts = []
    for g in range(cfg.grids):
        rows = np.arange(g * per, (g + 1) * per)
        parts.append(grid_pool_mean(take_rows(x_vision, rows), cfg.grid_side, cfg.factor))
    return concat(parts, axis=-2)


def correspondence(cfg: SpatialProxyConfig) -> np.ndarray:
    """Map each full vision token index to the proxy covering its window.

    Returns (grids * side^2,) int array of global proxy indices.
    """
    m = cfg.proxy_side
    out = np.empty(cfg.grids * cfg.tokens_per_grid, dtype=np.int64)
    i = 0
    for g in range(cfg.grids):
        for r in range(cfg.grid_side):
            for c in range(cfg.grid_side):
                out[i] = g * cfg.proxies_per_grid + (r // cfg.factor) * m + (c // cfg.factor)
                i += 1
    return out


# ---- Guided update ----


@dataclass
class GuidedUpdateParams:
    """Two d->h down-projections, a 2h->h mixing layer, and a zero-init h->d output."""

    down_full: Parameter
    down_proxy: Parameter
    mix: Parameter
    out: Parameter

    @staticmethod
    def create(prefix: str, width: int, hidden: int, rng: SeededRng, std: float = 0.02, dtype=np.float32) -> "GuidedUpdateParams":
        return GuidedUpdateParams(
            down_full=Parameter(f"{prefix}.down_full", rng.normal((width, hidden), std, dtype)),
            down_proxy=Parameter(f"{prefix}.down_proxy", rng.normal((width, hidden), std, dtype)),
            mix=Parameter(f"{prefix}.mix", rng.normal((2 * hidden, hidden), std, dtype)),
            out=Parameter(f"{prefix}.out", np.zeros((hidden, width), dtype=dtype)),
        )

    def param_count(self) -> int:
        return sum(p.data.size for p in (self.down_full, self.down_proxy, self.mix, self.out))


def guided_update_from_aligned(x_full: Tensor, aligned: Tensor, params: GuidedUpdateParams) -> Tensor:
    """Residual update of full tokens from per-token guidance rows.

    x_full, aligned (..., n_v, d) -> (..., n_v, d). Zero-init `out` makes this
    the identity at initialization, bit for bit.
    """
    if x_full.shape != aligned.shape:
        raise ShapeError(f"guided update: full {x_full.shape} vs guidance {aligned.shape}")
    a = linear(x_full, params.down_full)
    b = linear(aligned, params.down_proxy)
    z = silu(linear(concat([a, b], axis=-1), params.mix))
    return x_full + linear(z, params.out)


def guided_update(x_full: Tensor, proxies: Tensor, corr: np.ndarray, params: GuidedUpdateParams) -> Tensor:
    """Spatial variant: expand proxies to their corresponding full-token rows first.

    Expansion before the down-projection keeps runtime MACs equal to the
    analytical n_v * (2*d*h + 2*h^2 + h*d) accounting.
    """
    return guided_update_from_aligned(x_full, take_rows(proxies, corr), params)


# ---- Non-spatial variant ----


@dataclass
class NonSpatialProxyParams:
    """Learnable mixture queries (m, d_q) and a key projection (d, d_q)."""

    queries: Parameter
    key_proj: Parameter

    @staticmethod
    def create(prefix: str, width: int, query_dim: int, proxy_count: int, rng: SeededRng, std: float = 0.02, dtype=np.float32) -> "NonSpatialProxyParams":
        return NonSpatialProxyParams(
            queries=Parameter(f"{prefix}.queries", rng.normal((proxy_count, query_dim), std, dtype)),
            key_proj=Parameter(f"{prefix}.key_proj", rng.normal((width, query_dim), std, dtype)),
        )


def nonspatial_generate(x_vision: Tensor, params: NonSpatialProxyParams) -> tuple[Tensor, Tensor]:
    """Proxies as softmax mixtures of full tokens.

    x (B, n_g, d) -> (proxies (B, m, d), logits A (B, m, n_g)). A is scaled by
    1/sqrt(d_q) and returned for reuse by the splat.
    """
    if x_vision.ndim != 3:
        raise ShapeError(f"nonspatial_generate expects (B, n, d), got {x_vision.shape}")
    m, dq = params.queries.shape
    keys = linear(x_vision, params.key_proj)
    q = tile_leading(params.queries, x_vision.shape[0])
    logits = bmm(q, transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(dq))
    proxies = bmm(softmax(logits, axis=-1), x_vision)
    return proxies, logits


def nonspatial_splat(proxies: Tensor, logits: Tensor) -> Tensor:
    """Guidance for full tokens by transposing the generation logits.

    proxies (B, m, d) are the current (post-layer) proxy states; logits is the
    matrix returned by nonspatial_generate in the same layer. The softmax runs
    along the proxy axis. Returns (B, n_g, d).
    """
    if proxies.shape[:2] != (logits.shape[0], logits.shape[1]):
        raise ShapeError(f"nonspatial_splat: proxies {proxies.shape} vs logits {logits.shape}")
    weights = softmax(transpose(logits, (0, 2, 1)), axis=-1)
    return bmm(weights, proxies)


def guided_update_ns(x_full: Tensor, guidance: Tensor, params: GuidedUpdateParams) -> Tensor:
    """Non-spatial variant: guidance rows already align with full tokens."""
    return guided_update_from_aligned(x_full, guidance, params)
