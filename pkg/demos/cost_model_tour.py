#!/usr/bin/env python3
"""Walk through the analytical prefill cost model.

Run with `python3 demos/cost_model_tour.py`. Finishes in well under a
second; everything here is closed-form arithmetic, no training.

The tour covers, in order:
  1. the per-layer MAC breakdown of a full decoder layer vs the reduced
     vision regimes on a 7B-class shape,
  2. whole-model reductions for suffix schedules (baseline below a start
     layer, reduced mode above),
  3. what the added per-layer modules cost in parameters,
  4. the token-reduction baselines (pruning / staged dropping) for
     comparison, and how token- and computation-level reduction stack.
"""

from proxyv.costs import (
    VICUNA_7B,
    TokenCounts,
    combined_report,
    counts_for_schedule,
    layer_macs,
    model_report,
    params_guided_update,
    params_light_mlp,
    reference_suite,
    render_suite,
)
from proxyv.modes import LayerMode, suffix_schedule

# the paper-scale scenario: five AnyRes grids of 24x24 patches plus prompt
COUNTS = TokenCounts(vision=2880, proxy=0, text=55, grids=5)
PROXY_COUNTS = TokenCounts(vision=2880, proxy=180, text=55, grids=5)


def fmt(n):
    return f"{n / 1e9:8.2f} GMAC"


def section(title):
    print()
    print(f"== {title} ==")


section("per-layer cost, one 7B-class layer on 2880 vision + 55 text tokens")
for mode, counts in [
    (LayerMode.BASELINE, COUNTS),
    (LayerMode.ATTN_SKIP, COUNTS),
    (LayerMode.LIGHT_MLP, COUNTS),
    (LayerMode.PROXYV_SPATIAL, PROXY_COUNTS),
    (LayerMode.PROXYV_NONSPATIAL, PROXY_COUNTS),
]:
    lm = layer_macs(mode, counts, VICUNA_7B)
    qkvo = lm.q_proj + lm.k_proj + lm.v_proj + lm.o_proj
    print(f"{mode.value:18s} qkvo {fmt(qkvo)}  scores {fmt(lm.scores)}  "
          f"ffn {fmt(lm.ffn)}  extra {fmt(lm.extra)}  total {fmt(lm.total)}")

section("whole-model suffix schedules (reduced mode from a start layer up)")
for mode in (LayerMode.ATTN_SKIP, LayerMode.LIGHT_MLP, LayerMode.PROXYV_SPATIAL):
    for start in (0, 12, 16):
        schedule = suffix_schedule(VICUNA_7B.layers, mode, start)
        proxies = 180 if mode.uses_proxies else 0
        counts = counts_for_schedule(schedule, 2880, 55, 5, proxies)
        report = model_report(schedule, counts, VICUNA_7B, baseline_counts=COUNTS)
        print(f"{mode.value:18s} from layer {start:2d}: "
              f"{report.reduction_percent:5.2f}% fewer prefill FLOPs")

section("added parameters per layer at width 4096, hidden 1024")
print(f"light mlp      {params_light_mlp(4096, 1024):12,d}")
print(f"guided update  {params_guided_update(4096, 1024):12,d}")

section("token reduction baselines on the same scenario")
zip_report = combined_report(VICUNA_7B, 2880, 55, 5, LayerMode.BASELINE,
                             VICUNA_7B.layers, 0, reduction_kind="visionzip",
                             dominant=360, contextual=40)
drop_report = combined_report(VICUNA_7B, 2880, 55, 5, LayerMode.BASELINE,
                              VICUNA_7B.layers, 0, reduction_kind="pyramiddrop",
                              drop_layers=[12, 20, 26])
print(f"visionzip    {zip_report.reduction_percent:5.2f}% fewer prefill FLOPs")
print(f"pyramiddrop  {drop_report.reduction_percent:5.2f}% fewer prefill FLOPs")

section("stacking token- and computation-level reduction")
combo = combined_report(VICUNA_7B, 2880, 55, 5, LayerMode.PROXYV_NONSPATIAL, 12, 180,
                        reduction_kind="visionzip", dominant=360, contextual=40)
print(f"visionzip then non-spatial proxies from layer 12: "
      f"{combo.reduction_percent:5.2f}%")

section("published-figure reference suite")
print(render_suite(reference_suite()))
