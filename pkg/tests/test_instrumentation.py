"""Instrumented MAC counts must equal the analytical formulas exactly."""

import numpy as np
import pytest

from proxyv.costs import ArchSpec, TokenCounts, layer_macs
from proxyv.model import Model, ModelConfig
from proxyv.modes import LayerMode, parse_mode
from proxyv.rng import SeededRng
from proxyv.tensor import backward, count_macs, cross_entropy, mean_all, no_grad, reshape, tensor

MODES = ["baseline", "attn_skip", "light_mlp", "proxyv_spatial", "proxyv_nonspatial"]


def make_model(mode, grids=1, layers=2, start=0):
    cfg = ModelConfig(layers=layers, width=32, heads=2, ffn_width=48, vocab=32, grids=grids,
                      grid_side=4, downsample_factor=2, light_hidden=8, update_hidden=8,
                      query_dim=8, mode=mode, start_layer=start)
    return Model(cfg, seed=3)


def analytic(model, mode, grids, n_text):
    st = model.structure(grids, 4, 4, n_text)
    nv = grids * 16
    proxies = grids * st.ext.proxies_per_grid if st.ext is not None else 0
    lm = parse_mode(mode)
    counts = TokenCounts(nv, proxies if lm.uses_proxies else 0, n_text + grids, grids)
    return layer_macs(lm, counts, model.config.arch_spec())


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("grids", [1, 2])
def test_layer_macs_equal_analytic_exactly(mode, grids):
    model = make_model(mode, grids=grids)
    st = model.structure(grids, 4, 4, 5)
    r = SeededRng(1)
    x = tensor(r.normal((1, st.layout.n, 32), 0.5))
    with count_macs() as c:
        model.layer_forward(x, 0, st)
    assert c.total == analytic(model, mode, grids, 5).total, (
        f"{mode}/grids={grids}: instrumented {c.total} != analytic")


@pytest.mark.parametrize("mode", MODES)
def test_layer_macs_scale_linearly_with_batch(mode):
    model = make_model(mode)
    st = model.structure(1, 4, 4, 5)
    r = SeededRng(2)
    totals = []
    for b in (1, 3):
        x = tensor(r.normal((b, st.layout.n, 32), 0.5))
        with count_macs() as c:
            model.layer_forward(x, 0, st)
        totals.append(c.total)
    assert totals[1] == 3 * totals[0]


def test_backward_adds_no_macs():
    model = make_model("proxyv_spatial")
    st = model.structure(1, 4, 4, 5)
    r = SeededRng(3)
    x = tensor(r.normal((1, st.layout.n, 32), 0.5), requires_grad=True)
    with count_macs() as c:
        out = model.layer_forward(x, 0, st)
        fwd = c.total
        backward(mean_all(out))
    assert c.total == fwd


def test_counts_identical_with_and_without_tape():
    model = make_model("proxyv_nonspatial")
    st = model.structure(1, 4, 4, 5)
    r = SeededRng(4)
    data = r.normal((1, st.layout.n, 32), 0.5)
    with count_macs() as c1:
        model.layer_forward(tensor(data, requires_grad=True), 0, st)
    with no_grad(), count_macs() as c2:
        model.layer_forward(tensor(data), 0, st)
    assert c1.total == c2.total


def test_full_forward_equals_layer_sum_plus_head():
    grids, n_text, b = 2, 5, 1
    model = make_model("proxyv_spatial", grids=grids, layers=3, start=1)
    cfg = model.config
    r = SeededRng(5)
    vis_ids = r.integers(0, 32, (b, grids * 16))
    text = r.integers(0, 32, (b, n_text))
    with count_macs() as c:
        model.forward_prefill(model.encode_vision(vis_ids), text, sep_id=1,
                              grids=grids, grid_rows=4, grid_cols=4)
    per_layer = [analytic(model, mode.value, grids, n_text).total for mode in cfg.layer_modes]
    head = 1 * cfg.width * cfg.vocab  # one answer row through the output head
    assert c.total == b * (sum(per_layer) + head)


@pytest.mark.parametrize("mode", ["proxyv_spatial", "proxyv_nonspatial"])
def test_proxy_extra_terms_respond_to_extents(mode):
    """The added-module cost must move when its extents move."""
    small = analytic(make_model(mode), mode, 1, 5)
    big_model = make_model(mode)
    arch = big_model.config.arch_spec()
    bigger = ArchSpec(arch.layers, arch.width, arch.heads, arch.ffn_width,
                      arch.light_hidden, arch.update_hidden * 2, arch.query_dim * 2)
    counts = TokenCounts(16, 4, 6, 1)
    assert layer_macs(parse_mode(mode), counts, bigger).extra > small.extra


def test_training_step_counts_forward_only():
    """A full train step tallies exactly the forward pass, nothing more."""
    model = make_model("light_mlp", layers=2, start=1)
    r = SeededRng(6)
    vis_ids = r.integers(0, 32, (2, 16))
    text = r.integers(0, 32, (2, 5))
    with count_macs() as c:
        logits = model.forward_prefill(model.encode_vision(vis_ids), text, sep_id=1,
                                       grids=1, grid_rows=4, grid_cols=4)
        fwd = c.total
        loss = cross_entropy(reshape(logits, (2, 32)), np.array([1, 2]))
        backward(loss)
    assert c.total == fwd
    assert fwd == 2 * (sum(analytic(model, m.value, 1, 5).total for m in model.config.layer_modes)
                       + model.config.width * model.config.vocab)

def test_masked_layer_macs_equal_analytic_exactly():
    """Eval-time vision-attention masking must hit the analytic cost model."""
    from proxyv.costs import masked_layer_macs

    model = make_model("baseline", grids=2)
    st = model.structure(2, 4, 4, 5)
    r = SeededRng(7)
    x = tensor(r.normal((1, st.layout.n, 32), 0.5))
    counts = TokenCounts(32, 0, 7, 2)
    with count_macs() as c:
        model.layer_forward(x, 0, st, mask_vision=True)
    assert c.total == masked_layer_macs(counts, model.config.arch_spec()).total


def test_masked_layer_is_cheaper_than_baseline():
    model = make_model("baseline")
    counts = TokenCounts(16, 0, 6, 1)
    arch = model.config.arch_spec()
    from proxyv.costs import masked_layer_macs

    masked = masked_layer_macs(counts, arch)
    full = layer_macs(LayerMode.BASELINE, counts, arch)
    assert masked.total < full.total
    # saving = vision rows' q and o projections plus their score/value rows
    n = counts.vision + counts.text
    saved = 2 * counts.vision * arch.width ** 2 + 2 * n * counts.vision * arch.width
    assert full.total - masked.total == saved
