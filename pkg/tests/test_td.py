import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import td_oracle
from conftest import toy_net
from sft import core, td


# ---------------------------------------------------------------------------
# init signal


def test_init_signal_one_hot():
    assert td.init_signal(3, 10).tolist() == [0, 0, 0, 1, 0, 0, 0, 0, 0, 0]
    assert td.init_signal(0, 10)[0] == 1
    assert td.init_signal(7, 10).sum() == 1
    with pytest.raises(ValueError):
        td.init_signal(10, 10)
    with pytest.raises(ValueError):
        td.init_signals([1, -1], 10)


def test_selection_params_ranges():
    for bad in ({"zeta": 0.0}, {"zeta": 1.5}, {"lam": -0.1}, {"connectivity": 6}):
        with pytest.raises(ValueError):
            td.SelectionParams(**bad)


# ---------------------------------------------------------------------------
# stage 1


def test_stage1_example():
    assert td.stage1_prune([5, 3, 1, 0.5, -2], 0.9).tolist() == [0, 1, 2]


def test_stage1_single_positive_always_kept():
    for z in (0.01, 0.5, 1.0):
        assert td.stage1_prune([-1, 4, 0, -3], z).tolist() == [1]


def test_stage1_all_nonpositive_empty():
    assert td.stage1_prune([-1, 0, -3], 0.9).size == 0
    assert td.stage1_prune([], 0.9).size == 0


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False, width=32), min_size=0, max_size=200),
    st.floats(0.05, 1.0),
)
def test_stage1_matches_prefix_oracle(vals, zeta):
    vals = np.asarray(vals, np.float64)
    assert td.stage1_prune(vals, zeta).tolist() == td_oracle.prune(list(vals), zeta)


def test_stage1_many_values_vs_oracle(rng):
    # crossing bucket large enough to take the sorted path
    for _ in range(50):
        vals = rng.normal(size=int(rng.integers(50, 3000))) ** 3
        z = float(rng.uniform(0.3, 1.0))
        assert td.stage1_prune(vals, z).tolist() == td_oracle.prune(list(vals), z)


# ---------------------------------------------------------------------------
# stage 2


def test_stage2_example():
    sel = td.stage2_group_select([(0, 0), (0, 1), (3, 3)], [2, 2, 5], 0.5, 8)
    assert sel.tolist() == [True, True, False]


def test_stage2_single_site():
    assert td.stage2_group_select([(2, 1)], [0.3]).tolist() == [True]


def test_stage2_tie_breaks_to_smaller_site():
    assert td.stage2_group_select([(2, 2), (0, 0)], [1.0, 1.0]).tolist() == [False, True]


def test_stage2_connectivity_matters():
    sites, vals = [(0, 0), (1, 1), (2, 2)], [1.0, 1.0, 3.0]
    assert td.stage2_group_select(sites, vals, 0.5, 8).all()
    assert td.stage2_group_select(sites, vals, 0.5, 4).tolist() == [False, False, True]


def test_stage2_channels_share_sites():
    # two channels at (0,0) count once for size, twice for activity
    sel = td.stage2_group_select([(0, 0), (0, 0), (2, 2)], [1.0, 1.0, 1.5])
    assert sel.tolist() == [True, True, False]


def test_stage2_matches_oracle(rng):
    for _ in range(300):
        k = int(rng.integers(2, 7))
        m = int(rng.integers(1, 12))
        sites = rng.integers(0, k, size=(m, 2))
        vals = rng.random(m)
        lam = float(rng.choice([0.0, 0.3, 0.5, 1.0]))
        conn = int(rng.choice([4, 8]))
        got = td.stage2_group_select(sites, vals, lam, conn)
        site_vals = {}
        for (r, c), v in zip(sites.tolist(), vals):
            site_vals[(r, c)] = site_vals.get((r, c), 0.0) + v
        rows, cols = sites[:, 0].max() + 1, sites[:, 1].max() + 1
        win = td_oracle.best_component(site_vals, rows, cols, lam, conn)
        assert got.tolist() == [tuple(s) in win for s in sites.tolist()]


# ---------------------------------------------------------------------------
# stage 3


def test_stage3_examples():
    acc = td.stage3_normalize_propagate([1.0, 3.0], 0.5, np.zeros(2))
    assert acc.tolist() == [0.125, 0.375]
    acc = td.stage3_normalize_propagate([2.0], 0.7, np.zeros(3), indices=[1])
    assert acc.tolist() == [0, 0.7, 0]


def test_stage3_accumulates_and_sums_to_gate(rng):
    acc = np.zeros(5)
    vals = rng.random(5)
    td.stage3_normalize_propagate(vals, 0.3, acc)
    td.stage3_normalize_propagate(vals[:2], 0.2, acc, indices=[3, 4])
    assert acc.sum() == pytest.approx(0.5, rel=1e-12)


# ---------------------------------------------------------------------------
# layer functions


def test_conv_uniform_case():
    g_up = np.zeros((1, 1, 1, 1))
    g_up[0, 0, 0, 0] = 0.6
    g = td.td_layer_conv(g_up, np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32), 1, 0)
    assert np.allclose(g, 0.6 / 9) and g.sum() == pytest.approx(0.6)


def test_conv_single_positive_weight():
    w = -np.ones((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 2] = 0.5
    g = td.td_layer_conv(np.ones((1, 1, 1, 1)), np.ones((1, 1, 3, 3), np.float32), w, 1, 0)
    expect = np.zeros((1, 1, 3, 3))
    expect[0, 0, 1, 2] = 1.0
    assert np.array_equal(g, expect)


def test_conv_zero_upper_gives_zero(rng):
    g = td.td_layer_conv(np.zeros((2, 3, 2, 2)), rng.random((2, 2, 4, 4)).astype(np.float32),
                         rng.normal(size=(3, 2, 3, 3)).astype(np.float32), 1, 0)
    assert not g.any()


def test_conv_negative_inputs_use_negative_weights():
    # negative activity times negative weight is a positive contribution
    h = -np.ones((1, 1, 2, 2), np.float32)
    w = np.array([[[[1, -2], [1, 1]]]], np.float32)
    g = td.td_layer_conv(np.ones((1, 1, 1, 1)), h, w, 1, 0)
    assert g[0, 0].tolist() == [[0, 1], [0, 0]]


def test_pool_routes_to_winner():
    h = np.array([[[[1, 5], [2, 0]]]], np.float32)
    t = core.Tape()
    _, amax = core.maxpool2d(t.constant(h), 2, 2)
    g = td.td_layer_pool(np.full((1, 1, 1, 1), 0.7), amax, h.shape)
    assert g[0, 0, 0, 1] == 0.7 and g.sum() == 0.7


def test_pool_two_parents():
    h = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    _, amax = core.maxpool2d(core.Tape().constant(h), 2, 2)
    g_up = np.zeros((1, 1, 2, 2))
    g_up[0, 0, 0, 0], g_up[0, 0, 1, 1] = 0.2, 0.5
    g = td.td_layer_pool(g_up, amax, h.shape)
    assert np.count_nonzero(g) == 2 and g.sum() == pytest.approx(0.7)


def test_relu_examples(rng):
    g = rng.random((2, 3))
    assert np.array_equal(td.td_layer_relu(g, np.ones((2, 3))), g)
    assert not td.td_layer_relu(g, -np.ones((2, 3))).any()
    h = rng.normal(size=(2, 3))
    assert td.td_layer_relu(g, h).sum() == pytest.approx(g[h > 0].sum())


def test_fc_examples():
    w = np.eye(4, dtype=np.float32)
    h = np.zeros((1, 4), np.float32)
    h[0, 2] = 1
    g_up = np.zeros((1, 4))
    g_up[0, 2] = 0.8
    assert td.td_layer_fc(g_up, h, w).tolist() == [[0, 0, 0.8, 0]]
    assert not td.td_layer_fc(np.zeros((1, 4)), h, w).any()


def test_fc_uniform_prefix():
    h = np.ones((1, 10), np.float32)
    w = np.ones((1, 10), np.float32)
    g = td.td_layer_fc(np.ones((1, 1)), h, w, td.SelectionParams(zeta=0.9))
    # nine equal terms reach 0.9; ties keep the lower indices
    assert np.count_nonzero(g) == 9 and g[0, 9] == 0
    assert np.allclose(g[0, :9], 1 / 9)


# ---------------------------------------------------------------------------
# full pass


def _mass_check(net, trace, gating, params):
    """Per layer: sum(g_low) equals the upper mass over parents that kept a non-empty group."""
    hs = trace.layer_outputs
    for i, layer in enumerate(net.layers):
        g_up, g_low, h = gating[i + 1], gating[i], hs[i].astype(np.float64)
        if layer.kind == "relu":
            assert g_low.sum() == pytest.approx(g_up[h > 0].sum(), rel=1e-12, abs=1e-15)
            continue
        if layer.kind in ("flatten", "pool"):
            assert g_low.sum() == pytest.approx(g_up.sum(), rel=1e-5, abs=1e-12)
            continue
        w = net.params[layer.weight].value.astype(np.float64)
        if layer.kind == "linear":
            has_pos = ((h[:, None, :] * w[None]) > 0).any(axis=2)
        else:
            hp = np.pad(h, ((0, 0), (0, 0), (layer.pad,) * 2, (layer.pad,) * 2))
            k, s = w.shape[2], layer.stride
            has_pos = np.zeros(g_up.shape, bool)
            for y in range(g_up.shape[2]):
                for x in range(g_up.shape[3]):
                    win = hp[:, :, y * s:y * s + k, x * s:x * s + k]
                    has_pos[:, :, y, x] = (win[:, None] * w[None] > 0).reshape(win.shape[0], w.shape[0], -1).any(-1)
        active = g_up[has_pos].sum()
        assert g_low.sum() == pytest.approx(active, rel=1e-5, abs=1e-12)


def test_td_pass_matches_oracle_on_200_toy_nets():
    rng = np.random.default_rng(2024)
    for case in range(200):
        net = toy_net(rng)
        n = int(rng.integers(1, 4))
        x = rng.random((n, *net.input_shape)).astype(np.float32)
        if case % 4 == 3:
            x -= 0.5  # signed inputs exercise negative-weight candidates
        params = td.SelectionParams(
            zeta=float(rng.choice([0.5, 0.9, 1.0])), lam=float(rng.choice([0.0, 0.5, 1.0])),
            connectivity=int(rng.choice([4, 8])),
        )
        logits, trace = net.forward(x)
        labels = rng.integers(0, net.num_classes, n)
        d = td.init_signals(labels, net.num_classes)
        got = td.td_pass(net, trace, d, params)
        ref = td_oracle.td_pass(net, trace.layer_outputs, d, params.zeta, params.lam, params.connectivity)
        assert len(got) == len(ref) == len(net.layers) + 1
        for a, b in zip(got, ref):
            assert a.shape == b.shape
            assert np.array_equal(a > 0, b > 0), f"case {case}: support differs"
            assert np.allclose(a, b, rtol=1e-9, atol=1e-15), f"case {case}"
            assert (a >= 0).all()
        _mass_check(net, trace, got, params)


def test_td_pass_shapes_and_top(rng):
    net = toy_net(rng, 2, pool=True)
    x = rng.random((3, *net.input_shape)).astype(np.float32)
    _, trace = net.forward(x)
    d = td.init_signals([0, 1, 0], net.num_classes)
    gating = td.td_pass(net, trace, d)
    assert [g.shape for g in gating] == [h.shape for h in trace.layer_outputs]
    assert np.array_equal(gating[-1], d)


def test_td_pass_rejects_mismatch(rng):
    net = toy_net(rng, 1)
    _, trace = net.forward(rng.random((1, *net.input_shape)).astype(np.float32))
    with pytest.raises(ValueError):
        td.td_pass(net, type(trace)(trace.layer_outputs[:-1], trace.pool_argmax), td.init_signals([0], net.num_classes))
    with pytest.raises(ValueError):
        td.td_pass(net, trace, np.ones(net.num_classes + 1))


def test_all_negative_weights_gives_zero_input_gating(rng):
    net = toy_net(rng, 1, channels=1, size=6, pool=False)
    for p in net.params.values():
        if p.name.endswith("weight"):
            p.value[...] = -np.abs(p.value) - 0.1
    x = rng.random((2, *net.input_shape)).astype(np.float32)
    _, trace = net.forward(x)
    g = td.td_pass(net, trace, td.init_signals([0, 1], net.num_classes))
    assert not g[0].any()


def test_locality_inside_receptive_fields(rng):
    """Children gated by a conv layer lie inside the receptive fields of gated parents."""
    for _ in range(30):
        net = toy_net(rng, 2)
        x = rng.random((1, *net.input_shape)).astype(np.float32)
        _, trace = net.forward(x)
        gating = td.td_pass(net, trace, td.init_signals([0], net.num_classes))
        for i, layer in enumerate(net.layers):
            if layer.kind != "conv":
                continue
            g_up, g_low = gating[i + 1][0], gating[i][0]
            k = net.params[layer.weight].shape[2]
            s, p = layer.stride, layer.pad
            cone = np.zeros((g_low.shape[1] + 2 * p, g_low.shape[2] + 2 * p), bool)
            for _, y, xx in zip(*np.nonzero(g_up)):
                cone[y * s:y * s + k, xx * s:xx * s + k] = True
            cone = cone[p:p + g_low.shape[1], p:p + g_low.shape[2]]
            assert not (g_low.any(axis=0) & ~cone).any()


def test_td_pass_deterministic(rng):
    net = toy_net(rng, 2)
    x = rng.random((4, *net.input_shape)).astype(np.float32)
    _, trace = net.forward(x)
    d = td.init_signals([0, 1, 0, 1], net.num_classes)
    a = td.td_pass(net, trace, d)
    b = td.td_pass(net, trace, d)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_lenet_gating_lands_on_digit(rng):
    """Untrained LeNet, zero background: every gated input pixel is a digit pixel."""
    from sft import models

    net = models.build_lenet5_64(seed=0)
    x = np.zeros((2, 1, 64, 64), np.float32)
    x[0, 0, 5:20, 30:45] = rng.random((15, 15))
    x[1, 0, 40:60, 2:22] = rng.random((20, 20))
    _, trace = net.forward(x)
    g = td.td_pass(net, trace, td.init_signals([3, 4], 10))
    assert g[0].shape == x.shape
    for j in range(2):
        assert g[0][j].any()
        assert not (g[0][j] > 0)[x[j] == 0].any()


# ---------------------------------------------------------------------------
# boxes


def test_extract_bbox_examples():
    g = np.zeros((16, 16))
    g[2, 3] = 0.1
    g[10, 7] = 0.2
    assert td.extract_bbox(g) == (3, 2, 7, 10)
    g = np.zeros((5, 5))
    g[4, 1] = 1
    assert td.extract_bbox(g) == (1, 4, 1, 4)
    assert td.extract_bbox(np.zeros((5, 5))) is None
    assert td.extract_bbox(g[None]) == (1, 4, 1, 4)
