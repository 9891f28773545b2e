import json

import numpy as np
import pytest
from _builders import positive_chain_model, positive_input

from forensicff.errors import GraphValidationError, TraceMismatchError
from forensicff.lrp import (
    backward_from,
    beta0_redistribute,
    dump_relevance,
    epsilon_redistribute,
    lrp_backward,
)
from forensicff.model import LayerSpec, _build_graph, forward

F32 = np.float32


# ---------------------------------------------------------------------------
# single-neuron rules


def test_beta0_single_positive_contribution_takes_all():
    assert beta0_redistribute([(1, 1), (2, -1)], 1.0) == [1.0, 0.0]


def test_beta0_hand_example_conserves():
    out = beta0_redistribute([(1, 1), (2, 1), (3, -1)], 2.0)
    assert out == pytest.approx([2 / 3, 4 / 3, 0.0], rel=1e-12)
    assert sum(out) == pytest.approx(2.0, rel=1e-12)


def test_beta0_degenerate_denominator_gives_zeros():
    assert beta0_redistribute([(1, -1), (-2, 1), (0, 5)], 5.0) == [0.0, 0.0, 0.0]


def test_beta0_conservation_random_cases():
    rng = np.random.default_rng(17)
    for _ in range(300):
        n = int(rng.integers(1, 9))
        xs, ws = rng.normal(size=n), rng.normal(size=n)
        r_y = float(rng.normal())
        out = beta0_redistribute(list(zip(xs, ws)), r_y)
        pos = np.maximum(xs * ws, 0.0)
        if pos.sum() > 0:
            # closed-formula agreement and conservation
            expected = r_y * pos / pos.sum()
            np.testing.assert_allclose(out, expected, rtol=1e-6, atol=1e-12)
            assert sum(out) == pytest.approx(r_y, rel=1e-6, abs=1e-9)
        else:
            assert out == [0.0] * n


def test_epsilon_symmetric_split():
    out = epsilon_redistribute([(1, 0.5), (1, 0.5)], 0.0, 1.0, eps=1e-12)
    assert out == pytest.approx([0.5, 0.5], rel=1e-9)


def test_epsilon_direct_formula():
    out = epsilon_redistribute([(2, 1)], 0.0, 2.0, eps=0.01)
    assert out == pytest.approx([2 * 2 / 2.01], rel=1e-12)


def test_epsilon_zero_preactivation_uses_positive_sign():
    out = epsilon_redistribute([(1, 1), (-1, 1)], 0.0, 1.0, eps=0.25)
    assert out == pytest.approx([4.0, -4.0], rel=1e-12)


# ---------------------------------------------------------------------------
# conv backward vs a per-neuron oracle


def _conv_oracle(weight, x, r_out, stride, padding):
    """Scatter each output neuron's relevance with the scalar formula."""
    out_c, in_c, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (ph, ph), (pw, pw)))
    rx = np.zeros_like(xp)
    _, oh, ow = r_out.shape
    for oc in range(out_c):
        for i in range(oh):
            for j in range(ow):
                pairs, coords = [], []
                for c in range(in_c):
                    for a in range(kh):
                        for b in range(kw):
                            pairs.append((xp[c, i * sh + a, j * sw + b], weight[oc, c, a, b]))
                            coords.append((c, i * sh + a, j * sw + b))
                shares = beta0_redistribute(pairs, float(r_out[oc, i, j]))
                for (c, h, w), s in zip(coords, shares):
                    rx[c, h, w] += s
    h, w = x.shape[1:]
    return rx[:, ph : ph + h, pw : pw + w]


def test_conv_backward_matches_per_neuron_oracle():
    rng = np.random.default_rng(23)
    for stride, padding in [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (1, 1))]:
        layers = [
            LayerSpec("c", "conv2d", ("input",),
                      {"out_channels": 4, "kernel": [3, 3],
                       "stride": list(stride), "padding": list(padding)}),
            LayerSpec("g", "globalavgpool", ("c",)),
            LayerSpec("f", "flatten", ("g",)),
            LayerSpec("h", "linear", ("f",), {"out_features": 1}),
        ]
        params = {
            "c": {"weight": rng.normal(size=(4, 3, 3, 3)).astype(F32)},
            "h": {"weight": rng.normal(size=(1, 4)).astype(F32)},
        }
        g = _build_graph(layers, params, (3, 6, 6), [0, 0, 0], [1, 1, 1])
        x = rng.normal(size=(3, 6, 6)).astype(F32)
        trace = forward(g, x)
        r_out = rng.normal(size=trace.outputs["c"].shape).astype(F32)
        record = backward_from(g, trace, "c", r_out)
        oracle = _conv_oracle(params["c"]["weight"].astype(np.float64),
                              x, r_out.astype(np.float64), stride, padding)
        np.testing.assert_allclose(record.input_relevance, oracle, rtol=1e-4, atol=1e-6)


# ---------------------------------------------------------------------------
# whole-graph propagation


def _identity_linear_graph():
    layers = [
        LayerSpec("f", "flatten", ("input",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    params = {"h": {"weight": np.ones((1, 1), dtype=F32)}}
    return _build_graph(layers, params, (1, 1, 1), [0.0], [1.0])


def test_identity_network_conserves_seed():
    g = _identity_linear_graph()
    trace = forward(g, np.array([3.0], dtype=F32).reshape(1, 1, 1))
    assert trace.logit == 3.0
    record = lrp_backward(g, trace, eps=1e-9)
    assert float(record.input_relevance.sum()) == pytest.approx(3.0, rel=1e-6)


def test_conv_then_linear_conservation():
    layers = [
        LayerSpec("c", "conv2d", ("input",),
                  {"out_channels": 1, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("g", "globalavgpool", ("c",)),
        LayerSpec("f", "flatten", ("g",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    params = {
        "c": {"weight": np.ones((1, 1, 1, 1), dtype=F32)},
        "h": {"weight": np.ones((1, 1), dtype=F32)},
    }
    g = _build_graph(layers, params, (1, 3, 3), [0.0], [1.0])
    x = np.arange(1, 10, dtype=F32).reshape(1, 3, 3) / 10
    trace = forward(g, x)
    record = lrp_backward(g, trace, eps=1e-9)
    assert float(np.sum(record.input_relevance, dtype=np.float64)) == pytest.approx(
        trace.logit, rel=1e-6
    )


def test_maxpool_winner_take_all():
    layers = [
        LayerSpec("p", "maxpool2d", ("input",), {"kernel": [2, 2], "stride": [2, 2]}),
        LayerSpec("f", "flatten", ("p",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    params = {"h": {"weight": np.ones((1, 1), dtype=F32)}}
    g = _build_graph(layers, params, (1, 2, 2), [0.0], [1.0])
    x = np.array([[1, 2], [3, 4]], dtype=F32).reshape(1, 2, 2)
    trace = forward(g, x)
    record = backward_from(g, trace, "p", np.full((1, 1, 1), 8.0))
    np.testing.assert_array_equal(
        record.input_relevance, np.array([[0, 0], [0, 8]], dtype=F32).reshape(1, 2, 2)
    )


def test_maxpool_tie_goes_to_first_in_scan_order():
    layers = [
        LayerSpec("p", "maxpool2d", ("input",), {"kernel": [2, 2], "stride": [2, 2]}),
        LayerSpec("f", "flatten", ("p",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    params = {"h": {"weight": np.ones((1, 1), dtype=F32)}}
    g = _build_graph(layers, params, (1, 2, 2), [0.0], [1.0])
    x = np.full((1, 2, 2), 7.0, dtype=F32)
    trace = forward(g, x)
    record = backward_from(g, trace, "p", np.full((1, 1, 1), 1.0))
    np.testing.assert_array_equal(
        record.input_relevance, np.array([[1, 0], [0, 0]], dtype=F32).reshape(1, 2, 2)
    )


def test_avgpool_splits_by_positive_parts():
    layers = [
        LayerSpec("p", "avgpool2d", ("input",), {"kernel": [1, 2], "stride": [1, 2]}),
        LayerSpec("f", "flatten", ("p",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    params = {"h": {"weight": np.ones((1, 1), dtype=F32)}}
    g = _build_graph(layers, params, (1, 1, 2), [0.0], [1.0])
    x = np.array([1.0, 3.0], dtype=F32).reshape(1, 1, 2)
    trace = forward(g, x)
    record = backward_from(g, trace, "p", np.full((1, 1, 1), 4.0))
    np.testing.assert_allclose(
        record.input_relevance, np.array([1.0, 3.0], dtype=F32).reshape(1, 1, 2), rtol=1e-6
    )
    # a window with no positive inputs receives nothing
    x_neg = np.array([-1.0, -3.0], dtype=F32).reshape(1, 1, 2)
    trace = forward(g, x_neg)
    record = backward_from(g, trace, "p", np.full((1, 1, 1), 4.0))
    assert not record.input_relevance.any()


def test_network_conservation_on_random_positive_models():
    rng = np.random.default_rng(31)
    for _ in range(5):
        g = positive_chain_model(rng)
        x = positive_input(rng)
        trace = forward(g, x)
        record = lrp_backward(g, trace, eps=1e-9)
        total = float(np.sum(record.input_relevance, dtype=np.float64))
        assert total == pytest.approx(record.seed_value, rel=1e-3)


def test_nonnegative_below_positive_injection():
    rng = np.random.default_rng(37)
    g = positive_chain_model(rng)
    x = positive_input(rng)
    trace = forward(g, x)
    top_conv = g.conv_ids[-1]
    injected = np.abs(rng.normal(size=trace.outputs[top_conv].shape))
    record = backward_from(g, trace, top_conv, injected)
    assert np.all(record.input_relevance >= 0)
    for lid, rel in record.layers.items():
        assert np.all(rel >= 0), lid


def test_backward_deterministic_bit_identical():
    rng = np.random.default_rng(41)
    g = positive_chain_model(rng)
    x = positive_input(rng)
    trace = forward(g, x)
    r1 = lrp_backward(g, trace)
    r2 = lrp_backward(g, trace)
    np.testing.assert_array_equal(r1.input_relevance, r2.input_relevance)
    for lid in r1.layers:
        np.testing.assert_array_equal(r1.layers[lid], r2.layers[lid])


def test_every_conv_layer_has_an_entry():
    rng = np.random.default_rng(43)
    g = positive_chain_model(rng)
    trace = forward(g, positive_input(rng))
    record = lrp_backward(g, trace)
    for lid in g.conv_ids:
        assert record.layers[lid].shape == trace.outputs[lid].shape


def test_unfused_batchnorm_rejected():
    from _builders import convbn_chain_model

    rng = np.random.default_rng(47)
    g = convbn_chain_model(rng)
    trace = forward(g, rng.uniform(0, 1, (3,) + g.input_shape[1:]).astype(F32))
    with pytest.raises(GraphValidationError, match="graph validation error"):
        lrp_backward(g, trace)


def test_trace_mismatch_rejected():
    rng = np.random.default_rng(53)
    g1 = positive_chain_model(rng)
    g2 = positive_chain_model(rng)
    trace = forward(g1, positive_input(rng))
    with pytest.raises(TraceMismatchError, match="trace mismatch error"):
        lrp_backward(g2, trace)


def test_dump_relevance_round_trips(tmp_path):
    rng = np.random.default_rng(59)
    g = positive_chain_model(rng)
    trace = forward(g, positive_input(rng))
    record = lrp_backward(g, trace)
    index_path = dump_relevance(record, tmp_path / "dump")
    index = json.loads(index_path.read_text())
    assert index["seed_value"] == record.seed_value
    for lid, entry in index["layers"].items():
        raw = np.fromfile(tmp_path / "dump" / entry["file"], dtype="<f4")
        source = record.input_relevance if lid == "input" else record.layers[lid]
        np.testing.assert_array_equal(raw.reshape(entry["shape"]), source)
