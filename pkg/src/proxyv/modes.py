"""Per-layer compute regimes and schedule construction."""

from __future__ import annotations

from enum import Enum

from .errors import ConfigError


class LayerMode(str, Enum):
    """How a decoder layer treats its vision tokens."""

    BASELINE = "baseline"                 # full attention + FFN for everyone
    ATTN_SKIP = "attn_skip"               # vision = keys/values only, updated by v- then o-projection
    LIGHT_MLP = "light_mlp"               # vision = keys/values only, updated by a small 3-matrix MLP
    PROXYV_SPATIAL = "proxyv_spatial"     # pooled thumbnail proxies compute, guided update writes back
    PROXYV_NONSPATIAL = "proxyv_nonspatial"  # learned-query mixture proxies, splat via transposed logits

    @property
    def uses_proxies(self) -> bool:
        return self in (LayerMode.PROXYV_SPATIAL, LayerMode.PROXYV_NONSPATIAL)


def parse_mode(name: str) -> LayerMode:
    try:
        return LayerMode(name)
    except ValueError:
        valid = ", ".join(m.value for m in LayerMode)
        raise ConfigError(f"unknown mode {name!r}; expected one of: {valid}") from None


def suffix_schedule(layers: int, mode: LayerMode, start_layer: int) -> tuple[LayerMode, ...]:
    """Baseline below start_layer, `mode` from start_layer on.

    start_layer == layers gives an all-baseline stack; start_layer == 0 applies
    the mode everywhere.
    """
    if not 0 <= start_layer <= layers:
        raise ConfigError(f"start layer {start_layer} outside [0, {layers}]")
    return tuple(LayerMode.BASELINE if i < start_layer else mode for i in range(layers))
