"""Descriptor validation, execution traces, folding, randomization, gradients."""

import numpy as np
import pytest

from conftest import central_diff, rel_err
from rsp import model as M
from rsp import toys
from rsp import weights_io as W
from rsp.model import LayerSpec, ModelDescriptor


def bn_net(seed=0, identity_bn=False):
    """conv -> batchnorm -> relu -> gap -> linear, random weights."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec("conv1", "conv", ("input",), {"weight": "conv1.w", "bias": "conv1.b"},
                  out_channels=3, kernel=(3, 3), padding=1),
        LayerSpec("bn1", "batchnorm", ("conv1",),
                  {"gamma": "bn1.g", "beta": "bn1.b", "mean": "bn1.m", "var": "bn1.v"}),
        LayerSpec("relu1", "relu", ("bn1",)),
        LayerSpec("gap", "global_avg_pool", ("relu1",)),
        LayerSpec("fc", "linear", ("gap",), {"weight": "fc.w", "bias": "fc.b"}, out_features=2),
    ]
    model = ModelDescriptor(layers=layers, input_shape=(2, 6, 6), class_names=["a", "b"],
                            normalization=(np.zeros(2, np.float32), np.ones(2, np.float32)),
                            feature_end="relu1")
    weights = {
        "conv1.w": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
        "conv1.b": rng.standard_normal(3).astype(np.float32),
        "bn1.g": np.ones(3, np.float32) if identity_bn else rng.uniform(0.5, 2, 3).astype(np.float32),
        "bn1.b": np.zeros(3, np.float32) if identity_bn else rng.standard_normal(3).astype(np.float32),
        "bn1.m": np.zeros(3, np.float32) if identity_bn else rng.standard_normal(3).astype(np.float32),
        "bn1.v": np.ones(3, np.float32) if identity_bn else rng.uniform(0.5, 2, 3).astype(np.float32),
        "fc.w": rng.standard_normal((2, 3)).astype(np.float32),
        "fc.b": rng.standard_normal(2).astype(np.float32),
    }
    return model, weights


class TestDescriptor:
    def test_json_round_trip(self):
        model, _ = toys.two_quadrant_model()
        text = M.descriptor_to_json(model)
        back = M.descriptor_from_json(text)
        assert M.descriptor_to_json(back) == text
        assert [l.name for l in back.layers] == [l.name for l in model.layers]

    def test_unknown_kind_rejected(self):
        model, _ = toys.two_quadrant_model()
        text = M.descriptor_to_json(model).replace('"kind": "relu"', '"kind": "gelu"')
        with pytest.raises(M.ModelError, match="unknown kind 'gelu'"):
            M.descriptor_from_json(text)

    def test_wrong_format_rejected(self):
        with pytest.raises(M.ModelError, match="rsp-model/1"):
            M.descriptor_from_json('{"format": "other/9", "layers": []}')

    def test_duplicate_names_rejected(self):
        layers = [
            LayerSpec("c", "conv", ("input",), {"weight": "w"}, out_channels=1, kernel=(1, 1)),
            LayerSpec("c", "relu", ("c",)),
        ]
        with pytest.raises(M.ModelError, match="duplicate layer name"):
            ModelDescriptor(layers=layers, input_shape=(1, 2, 2), class_names=["x"],
                            normalization=(np.zeros(1, np.float32), np.ones(1, np.float32)),
                            feature_end="c")

    def test_class_count_must_match_output(self):
        model, _ = toys.identity_net(2, 4)
        with pytest.raises(M.ModelError, match="class names"):
            ModelDescriptor(layers=model.layers, input_shape=model.input_shape,
                            class_names=["only_one"], normalization=model.normalization,
                            feature_end=model.feature_end)


class TestForwardTrace:
    def test_identity_net_logits_are_spatial_means(self, rng):
        model, weights = toys.identity_net(2, 4)
        image = rng.uniform(0, 1, (2, 4, 4)).astype(np.float32)
        trace = M.forward_trace(model, weights, image)
        assert np.allclose(trace.logits, image.mean(axis=(1, 2)), atol=1e-7)

    def test_zero_input_zero_biases_zero_logits(self):
        model, weights = toys.two_quadrant_model()
        weights = dict(weights)
        weights["conv1.bias"] = np.zeros(2, np.float32)
        weights["fc.bias"] = np.zeros(2, np.float32)
        trace = M.forward_trace(model, weights, np.zeros((2, 32, 32), np.float32))
        assert not trace.logits.any()

    def test_deterministic_bitwise(self, rng):
        model, weights, image = toys.random_toy_net(7)
        t1 = M.forward_trace(model, weights, image)
        t2 = M.forward_trace(model, weights, image)
        assert np.array_equal(t1.logits, t2.logits)
        for k in t1.outputs:
            assert np.array_equal(t1.outputs[k], t2.outputs[k])

    def test_residual_output_is_exact_sum(self):
        for seed in range(30):
            model, weights, image = toys.random_toy_net(seed)
            adds = [l for l in model.layers if l.kind == "residual_add"]
            if not adds:
                continue
            trace = M.forward_trace(model, weights, image)
            for add in adds:
                a, b = (trace.outputs[s] for s in add.inputs)
                assert np.array_equal(trace.outputs[add.name], a + b)
            return
        pytest.skip("no residual net generated in seed range")

    def test_missing_weight_names_layer(self):
        model, weights = toys.identity_net(2, 4)
        with pytest.raises(M.ModelError, match="conv1"):
            M.forward_trace(model, {}, np.zeros((2, 4, 4), np.float32))

    def test_wrong_image_shape_rejected(self):
        model, weights = toys.identity_net(2, 4)
        with pytest.raises(M.ModelError, match="input_shape"):
            M.forward_trace(model, weights, np.zeros((2, 5, 5), np.float32))


class TestFoldBatchnorm:
    def test_identity_bn_leaves_weights(self):
        model, weights = bn_net(identity_bn=True)
        folded, new_weights = M.fold_batchnorm(model, weights)
        assert np.allclose(new_weights["conv1.w"], weights["conv1.w"], atol=1e-7)
        assert np.allclose(new_weights["conv1.b"], weights["conv1.b"], atol=1e-6)

    def test_gamma_two_doubles_weight(self):
        layers = [
            LayerSpec("c", "conv", ("input",), {"weight": "c.w"}, out_channels=1, kernel=(1, 1)),
            LayerSpec("bn", "batchnorm", ("c",),
                      {"gamma": "g", "beta": "be", "mean": "m", "var": "v"}, eps=0.0),
            LayerSpec("gap", "global_avg_pool", ("bn",)),
        ]
        model = ModelDescriptor(layers=layers, input_shape=(1, 2, 2), class_names=["x"],
                                normalization=(np.zeros(1, np.float32), np.ones(1, np.float32)),
                                feature_end="c")
        weights = {"c.w": np.full((1, 1, 1, 1), 3.0, np.float32),
                   "g": np.array([2.0], np.float32), "be": np.zeros(1, np.float32),
                   "m": np.zeros(1, np.float32), "v": np.ones(1, np.float32)}
        folded, new_weights = M.fold_batchnorm(model, weights)
        assert np.allclose(new_weights["c.w"], 6.0)

    def test_forward_unchanged_and_no_bn_left(self, rng):
        model, weights = bn_net(seed=3)
        image = rng.uniform(0, 1, (2, 6, 6)).astype(np.float32)
        before = M.forward_trace(model, weights, image).logits
        folded, new_weights = M.fold_batchnorm(model, weights)
        assert all(l.kind != "batchnorm" for l in folded.layers)
        after = M.forward_trace(folded, new_weights, image).logits
        assert rel_err(after, before) <= 1e-5
        assert W.validate_against_descriptor(new_weights, folded).ok()

    def test_bn_without_conv_rejected(self):
        layers = [
            LayerSpec("c", "conv", ("input",), {"weight": "c.w"}, out_channels=1, kernel=(1, 1)),
            LayerSpec("r", "relu", ("c",)),
            LayerSpec("bn", "batchnorm", ("r",),
                      {"gamma": "g", "beta": "be", "mean": "m", "var": "v"}),
            LayerSpec("gap", "global_avg_pool", ("bn",)),
        ]
        model = ModelDescriptor(layers=layers, input_shape=(1, 2, 2), class_names=["x"],
                                normalization=(np.zeros(1, np.float32), np.ones(1, np.float32)),
                                feature_end="c")
        with pytest.raises(M.ModelError, match="not a conv"):
            M.fold_batchnorm(model, {"c.w": np.ones((1, 1, 1, 1), np.float32),
                                     "g": np.ones(1, np.float32), "be": np.zeros(1, np.float32),
                                     "m": np.zeros(1, np.float32), "v": np.ones(1, np.float32)})


class TestRandomizeCascading:
    def test_output_layer_scope(self):
        model, weights = toys.two_quadrant_model()
        new = M.randomize_cascading(model, weights, from_layer="fc", seed=1)
        assert not np.array_equal(new["fc.weight"], weights["fc.weight"])
        assert np.array_equal(new["conv1.weight"], weights["conv1.weight"])
        assert np.array_equal(new["conv2.weight"], weights["conv2.weight"])

    def test_first_layer_scope_touches_everything(self):
        model, weights = toys.two_quadrant_model()
        new = M.randomize_cascading(model, weights, from_layer="conv1", seed=1)
        for name in ("conv1.weight", "conv2.weight", "fc.weight"):
            assert not np.array_equal(new[name], weights[name])

    def test_same_seed_byte_identical(self):
        model, weights = toys.two_quadrant_model()
        a = M.randomize_cascading(model, weights, from_layer="conv1", seed=9)
        b = M.randomize_cascading(model, weights, from_layer="conv1", seed=9)
        assert W.write_archive(a) == W.write_archive(b)

    def test_unknown_layer_rejected(self):
        model, weights = toys.two_quadrant_model()
        with pytest.raises(M.ModelError, match="unknown layer"):
            M.randomize_cascading(model, weights, from_layer="nope", seed=0)


class TestOutputGradients:
    def test_matches_finite_differences_through_full_net(self, rng):
        model, weights, image = toys.random_toy_net(11)
        trace = M.forward_trace(model, weights, image)
        cot = np.zeros(len(trace.logits)); cot[0] = 1.0
        grads = M.output_gradients(model, weights, trace, cot)

        def f(img_flat):
            t = M.forward_trace(model, weights, img_flat.reshape(image.shape).astype(np.float32))
            return float(t.logits[0])

        fd = central_diff(f, image.astype(np.float64), h=1e-3).reshape(image.shape)
        assert rel_err(grads["input"][0], fd) <= 1e-2

    def test_gradient_present_for_every_layer(self):
        model, weights, image = toys.random_toy_net(2)
        trace = M.forward_trace(model, weights, image)
        grads = M.output_gradients(model, weights, trace, np.eye(len(trace.logits))[0])
        for layer in model.layers:
            assert layer.name in grads
        assert "input" in grads
