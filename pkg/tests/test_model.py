import json

import numpy as np
import pytest
from _builders import convbn_chain_model
from scipy.special import expit

from forensicff.errors import (
    FusionTopologyError,
    GraphValidationError,
    InputShapeError,
    ManifestError,
    MaskReferenceError,
    WeightArchiveError,
)
from forensicff.model import (
    DropoutMask,
    LayerSpec,
    _build_graph,
    forward,
    fuse_batchnorm,
    load_model,
    save_model,
    sigmoid,
)

F32 = np.float32


def tiny_graph(head_weight=None, conv_weight=None, conv_bias=None):
    """conv(3->3, 1x1) -> relu -> gap -> flatten -> linear(1)."""
    layers = [
        LayerSpec("c1", "conv2d", ("input",),
                  {"out_channels": 3, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("r1", "relu", ("c1",)),
        LayerSpec("g1", "globalavgpool", ("r1",)),
        LayerSpec("f1", "flatten", ("g1",)),
        LayerSpec("h", "linear", ("f1",), {"out_features": 1}),
    ]
    weight = conv_weight if conv_weight is not None else np.eye(3, dtype=F32).reshape(3, 3, 1, 1)
    params = {
        "c1": {"weight": weight.astype(F32)},
        "h": {"weight": (head_weight if head_weight is not None
                         else np.ones((1, 3), dtype=F32)).astype(F32)},
    }
    if conv_bias is not None:
        params["c1"]["bias"] = conv_bias.astype(F32)
    return _build_graph(layers, params, (3, 4, 4), [0, 0, 0], [1, 1, 1])


def test_identity_conv_forward_equals_input():
    g = tiny_graph()
    x = np.random.default_rng(0).uniform(0, 1, (3, 4, 4)).astype(F32)
    trace = forward(g, x)
    np.testing.assert_array_equal(trace.outputs["c1"], x)


def test_forward_deterministic_bit_identical():
    g = tiny_graph()
    x = np.random.default_rng(1).uniform(0, 1, (3, 4, 4)).astype(F32)
    t1, t2 = forward(g, x), forward(g, x)
    for lid in t1.outputs:
        np.testing.assert_array_equal(t1.outputs[lid], t2.outputs[lid])
    assert t1.logit == t2.logit


def test_add_node_is_exact_elementwise_sum():
    layers = [
        LayerSpec("a", "conv2d", ("input",),
                  {"out_channels": 2, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("b", "conv2d", ("input",),
                  {"out_channels": 2, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("s", "add", ("a", "b")),
        LayerSpec("g", "globalavgpool", ("s",)),
        LayerSpec("f", "flatten", ("g",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    rng = np.random.default_rng(2)
    params = {
        "a": {"weight": rng.normal(size=(2, 3, 1, 1)).astype(F32)},
        "b": {"weight": rng.normal(size=(2, 3, 1, 1)).astype(F32)},
        "h": {"weight": rng.normal(size=(1, 2)).astype(F32)},
    }
    g = _build_graph(layers, params, (3, 5, 5), [0, 0, 0], [1, 1, 1])
    trace = forward(g, rng.uniform(0, 1, (3, 5, 5)).astype(F32))
    np.testing.assert_array_equal(trace.outputs["s"], trace.outputs["a"] + trace.outputs["b"])


def test_empty_mask_is_noop_bit_identical():
    g = tiny_graph()
    x = np.random.default_rng(3).uniform(0, 1, (3, 4, 4)).astype(F32)
    t_plain = forward(g, x)
    t_masked = forward(g, x, mask=DropoutMask([]))
    for lid in t_plain.outputs:
        np.testing.assert_array_equal(t_plain.outputs[lid], t_masked.outputs[lid])


def test_full_mask_equals_zeroed_activation():
    g = tiny_graph()
    x = np.random.default_rng(4).uniform(0, 1, (3, 4, 4)).astype(F32)
    masked = forward(g, x, mask=DropoutMask([("c1", 0), ("c1", 1), ("c1", 2)]))
    # forwarding an all-zero activation from c1: conv weights zeroed reproduces it
    g_zero = tiny_graph(conv_weight=np.zeros((3, 3, 1, 1)))
    zeroed = forward(g_zero, x)
    assert masked.logit == zeroed.logit
    np.testing.assert_array_equal(masked.outputs["g1"], zeroed.outputs["g1"])


def test_mask_unknown_layer_or_channel_errors():
    g = tiny_graph()
    x = np.zeros((3, 4, 4), dtype=F32)
    with pytest.raises(MaskReferenceError, match="mask reference error"):
        forward(g, x, mask=DropoutMask([("nope", 0)]))
    with pytest.raises(MaskReferenceError, match="mask reference error"):
        forward(g, x, mask=DropoutMask([("c1", 7)]))


def test_input_shape_errors():
    g = tiny_graph()
    with pytest.raises(InputShapeError, match="input shape error"):
        forward(g, np.zeros((4, 4, 4), dtype=F32))


def test_rigid_model_rejects_other_spatial_sizes():
    layers = [
        LayerSpec("c1", "conv2d", ("input",),
                  {"out_channels": 2, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("f1", "flatten", ("c1",)),
        LayerSpec("h", "linear", ("f1",), {"out_features": 1}),
    ]
    params = {
        "c1": {"weight": np.ones((2, 3, 1, 1), dtype=F32)},
        "h": {"weight": np.ones((1, 2 * 4 * 4), dtype=F32)},
    }
    g = _build_graph(layers, params, (3, 4, 4), [0, 0, 0], [1, 1, 1])
    assert not g.flexible_spatial
    forward(g, np.zeros((3, 4, 4), dtype=F32))
    with pytest.raises(InputShapeError, match="input shape error"):
        forward(g, np.zeros((3, 5, 5), dtype=F32))


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(1e9) - 1.0) < 1e-12
    assert sigmoid(-2.0) == pytest.approx(float(expit(-2.0)), abs=1e-12)
    assert 0.0 < sigmoid(-30.0) < sigmoid(-1.0) < sigmoid(1.0) < 1.0


# ---------------------------------------------------------------------------
# archive round trips and error cases


def test_archive_round_trip_bit_identical(tmp_path):
    g = tiny_graph(conv_bias=np.array([0.5, -0.25, 0.0]))
    save_model(g, tmp_path / "model.json", tmp_path / "weights.bin")
    g2 = load_model(tmp_path / "model.json", tmp_path / "weights.bin")
    for spec in g.layers:
        for slot, arr in g.params.get(spec.id, {}).items():
            np.testing.assert_array_equal(arr, g2.params[spec.id][slot])
    assert g2.input_shape == g.input_shape


def test_missing_tensor_name_is_weight_archive_error(tmp_path):
    g = tiny_graph()
    save_model(g, tmp_path / "model.json", tmp_path / "weights.bin")
    manifest = json.loads((tmp_path / "model.json").read_text())
    manifest["layers"][0]["params"]["weight"] = "does.not.exist"
    (tmp_path / "model.json").write_text(json.dumps(manifest))
    with pytest.raises(WeightArchiveError, match="weight archive error"):
        load_model(tmp_path / "model.json", tmp_path / "weights.bin")


def test_truncated_weights_is_weight_archive_error(tmp_path):
    g = tiny_graph()
    save_model(g, tmp_path / "model.json", tmp_path / "weights.bin")
    blob = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(WeightArchiveError, match="weight archive error"):
        load_model(tmp_path / "model.json", tmp_path / "weights.bin")


def test_malformed_manifest_is_manifest_parse_error(tmp_path):
    (tmp_path / "model.json").write_text("{not json")
    (tmp_path / "weights.bin").write_bytes(b"")
    with pytest.raises(ManifestError, match="manifest parse error"):
        load_model(tmp_path / "model.json", tmp_path / "weights.bin")
    with pytest.raises(ManifestError, match="manifest parse error"):
        load_model(tmp_path / "missing.json", tmp_path / "weights.bin")


def test_forward_reference_is_graph_validation_error(tmp_path):
    g = tiny_graph()
    save_model(g, tmp_path / "model.json", tmp_path / "weights.bin")
    manifest = json.loads((tmp_path / "model.json").read_text())
    manifest["layers"][0]["inputs"] = ["h"]  # cycle: c1 <- h <- ... <- c1
    (tmp_path / "model.json").write_text(json.dumps(manifest))
    with pytest.raises(GraphValidationError, match="graph validation error"):
        load_model(tmp_path / "model.json", tmp_path / "weights.bin")


# ---------------------------------------------------------------------------
# batchnorm fusion


def _single_convbn(gamma, beta, mean, var, eps, conv_bias=None):
    layers = [
        LayerSpec("c", "conv2d", ("input",),
                  {"out_channels": 2, "kernel": [3, 3], "stride": [1, 1], "padding": [1, 1]}),
        LayerSpec("bn", "batchnorm2d", ("c",), {"epsilon": eps}),
        LayerSpec("r", "relu", ("bn",)),
        LayerSpec("g", "globalavgpool", ("r",)),
        LayerSpec("f", "flatten", ("g",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    rng = np.random.default_rng(9)
    params = {
        "c": {"weight": rng.normal(size=(2, 3, 3, 3)).astype(F32)},
        "bn": {
            "gamma": np.array(gamma, dtype=F32),
            "beta": np.array(beta, dtype=F32),
            "running_mean": np.array(mean, dtype=F32),
            "running_var": np.array(var, dtype=F32),
        },
        "h": {"weight": np.ones((1, 2), dtype=F32)},
    }
    if conv_bias is not None:
        params["c"]["bias"] = np.array(conv_bias, dtype=F32)
    return _build_graph(layers, params, (3, 6, 6), [0, 0, 0], [1, 1, 1])


def test_identity_batchnorm_fuses_to_unchanged_conv():
    g = _single_convbn([1, 1], [0, 0], [0, 0], [1, 1], eps=0.0)
    fused = fuse_batchnorm(g)
    np.testing.assert_array_equal(fused.params["c"]["weight"], g.params["c"]["weight"])
    np.testing.assert_array_equal(fused.params["c"]["bias"], np.zeros(2, dtype=F32))
    assert fused.layer("bn").kind == "identity"


def test_pure_scaling_batchnorm_doubles_conv():
    g = _single_convbn([2, 2], [0, 0], [0, 0], [1, 1], eps=0.0, conv_bias=[0.5, -1.0])
    fused = fuse_batchnorm(g)
    np.testing.assert_array_equal(fused.params["c"]["weight"], g.params["c"]["weight"] * 2)
    np.testing.assert_array_equal(fused.params["c"]["bias"], np.array([1.0, -2.0], dtype=F32))


def test_random_convbn_fusion_matches_unfused_forward():
    rng = np.random.default_rng(21)
    for _ in range(20):
        g = convbn_chain_model(rng)
        fused = fuse_batchnorm(g)
        x = rng.uniform(-1, 1, (3,) + g.input_shape[1:]).astype(F32)
        t0, t1 = forward(g, x), forward(fused, x)
        assert abs(t0.logit - t1.logit) < 1e-4
        for spec in g.layers:
            if spec.kind == "batchnorm2d":
                assert np.abs(t0.outputs[spec.id] - t1.outputs[spec.id]).max() < 1e-4


def test_batchnorm_without_conv_is_fusion_topology_error():
    layers = [
        LayerSpec("c", "conv2d", ("input",),
                  {"out_channels": 2, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("r", "relu", ("c",)),
        LayerSpec("bn", "batchnorm2d", ("r",), {"epsilon": 1e-5}),
        LayerSpec("g", "globalavgpool", ("bn",)),
        LayerSpec("f", "flatten", ("g",)),
        LayerSpec("h", "linear", ("f",), {"out_features": 1}),
    ]
    params = {
        "c": {"weight": np.ones((2, 3, 1, 1), dtype=F32)},
        "bn": {
            "gamma": np.ones(2, dtype=F32),
            "beta": np.zeros(2, dtype=F32),
            "running_mean": np.zeros(2, dtype=F32),
            "running_var": np.ones(2, dtype=F32),
        },
        "h": {"weight": np.ones((1, 2), dtype=F32)},
    }
    g = _build_graph(layers, params, (3, 4, 4), [0, 0, 0], [1, 1, 1])
    with pytest.raises(FusionTopologyError, match="fusion topology error"):
        fuse_batchnorm(g)
