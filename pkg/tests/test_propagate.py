"""Backward relevance engine: hand oracles, conservation, routing rules."""

import numpy as np
import pytest

from conftest import central_diff, rel_err
from rsp import model as M
from rsp import propagate as P
from rsp import relmap as RM
from rsp import tensor as T
from rsp import toys
from rsp.model import LayerSpec
from rsp.relmap import ClassSpec, SectionedRelevanceMap


LINEAR_LAYER = LayerSpec("fc", "linear", ("gap",), {"weight": "w"}, out_features=1)


def linear_hand_setup():
    x = np.array([[1.0, 2.0]], np.float32)
    rel = SectionedRelevanceMap.from_values(np.array([[3.0]], np.float64))
    return x, rel


class TestSectionalNu:
    def test_linear_hand_case(self):
        x, rel = linear_hand_setup()
        nu_p, nu_n = P.sectional_nu(x, LINEAR_LAYER, rel)
        assert np.array_equal(nu_p, np.array([[3.0, 6.0]]))
        assert not nu_n.any()

    def test_zero_relevance_zero_nu(self, rng):
        x = rng.standard_normal((1, 4)).astype(np.float32)
        rel = SectionedRelevanceMap.from_values(np.zeros((1, 2)))
        nu_p, nu_n = P.sectional_nu(x, LayerSpec("l", "linear", ("i",), out_features=2), rel)
        assert not nu_p.any() and not nu_n.any()

    def test_conv_nu_matches_finite_differences(self, rng):
        geom = T.ConvGeometry(2, 3, 3, 3, stride=1, padding=1)
        layer = LayerSpec("c", "conv", ("x",), {"weight": "w"}, out_channels=3,
                          kernel=(3, 3), padding=1)
        x = np.abs(rng.standard_normal((1, 2, 5, 5))).astype(np.float32)
        r = rng.standard_normal((1, 3, 5, 5))
        rel = SectionedRelevanceMap.from_values(r)
        nu_p, _ = P.sectional_nu(x, layer, rel, geom)
        w0 = rng.standard_normal((3, 2, 3, 3))
        p = rel.positive

        def f(wv):  # <conv(x, w) * B+, P> == <conv(x, w), P> since P lives on B+
            return float((T.conv2d_f64(x, wv.astype(np.float32), None, geom) * p).sum())

        fd = central_diff(f, w0, h=1e-3)
        assert rel_err(nu_p, fd) <= 1e-2

    def test_weightless_layer_rejected(self):
        rel = SectionedRelevanceMap.from_values(np.zeros((1, 2)))
        with pytest.raises(P.PropagationError, match="no weights"):
            P.sectional_nu(np.zeros((1, 2), np.float32),
                           LayerSpec("r", "relu", ("x",)), rel)


class TestPropagateLayer:
    def test_linear_hand_oracle_exact(self):
        # nu+ = [3, 6]; forward 15; ratio 0.2; pullback [0.6, 1.2]; times x -> [0.6, 2.4]
        x, rel = linear_hand_setup()
        nu_p, nu_n = P.sectional_nu(x, LINEAR_LAYER, rel)
        r_hat = P.propagate_layer(x, LINEAR_LAYER, nu_p, nu_n, rel)
        # the 1e-9 denominator guard perturbs the 64-bit result by < 2e-10
        assert np.allclose(r_hat, [[0.6, 2.4]], rtol=0.0, atol=1e-9)
        assert abs(float(r_hat.sum()) - 3.0) <= 1e-9

    def test_zero_input_kills_relevance(self):
        x = np.zeros((1, 2), np.float32)
        rel = SectionedRelevanceMap.from_values(np.array([[3.0]]))
        nu_p, nu_n = P.sectional_nu(x, LINEAR_LAYER, rel)
        r_hat = P.propagate_layer(x, LINEAR_LAYER, nu_p, nu_n, rel)
        assert not r_hat.any()

    def test_positive_homogeneity(self, rng):
        geom = T.ConvGeometry(2, 3, 3, 3, padding=1)
        layer = LayerSpec("c", "conv", ("x",), out_channels=3, kernel=(3, 3), padding=1)
        x = np.abs(rng.standard_normal((1, 2, 4, 4))).astype(np.float32)
        base = rng.standard_normal((1, 3, 4, 4))
        c = 2.75
        out = []
        for scale in (1.0, c):
            rel = SectionedRelevanceMap.from_values(base * scale)
            nu_p, nu_n = P.sectional_nu(x, layer, rel, geom)
            out.append(P.propagate_layer(x, layer, nu_p, nu_n, rel, geom=geom))
        assert rel_err(out[1], c * out[0]) <= 1e-5

    def test_conservation_on_random_conv(self, rng):
        geom = T.ConvGeometry(3, 4, 3, 3, padding=1)
        layer = LayerSpec("c", "conv", ("x",), out_channels=4, kernel=(3, 3), padding=1)
        x = np.abs(rng.standard_normal((1, 3, 6, 6))).astype(np.float32) + 0.1
        rel = SectionedRelevanceMap.from_values(rng.standard_normal((1, 4, 6, 6)))
        nu_p, nu_n = P.sectional_nu(x, layer, rel, geom)
        r_hat = P.propagate_layer(x, layer, nu_p, nu_n, rel, geom=geom)
        assert abs(float(r_hat.sum()) - rel.total()) <= 1e-6 * abs(rel.total())


class TestUniformShift:
    def test_forced_case(self):
        r_hat = np.array([1.0, 0.5, 0.0])
        x = np.array([1.0, 2.0, 0.0])
        out = P.uniform_shift(r_hat, x, 1.5)
        assert np.allclose(out, [1.25, 0.25, 0.0])
        assert np.isclose(out.sum(), 1.5)

    def test_uniform_relevance_is_fixed_point(self):
        r_hat = np.full(5, 0.3)
        x = np.ones(5)
        out = P.uniform_shift(r_hat, x, 1.5)
        assert np.allclose(out, 0.3)

    def test_sum_preserved_on_random_maps(self, rng):
        for _ in range(20):
            x = np.maximum(rng.standard_normal((1, 3, 4, 4)), 0.0)
            r_hat = rng.standard_normal((1, 3, 4, 4)) * (x > 0)
            s = float(r_hat.sum())
            out = P.uniform_shift(r_hat, x, s)
            assert abs(float(out.sum()) - s) <= 1e-6 * max(abs(s), 1.0)

    def test_dead_layer_rejected(self):
        with pytest.raises(P.PropagationError, match="dead layer"):
            P.uniform_shift(np.ones(3), np.zeros(3), 3.0)


class TestWeightlessRouting:
    def test_maxpool_routes_to_argmax(self):
        x = np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2)
        _, trace = T.maxpool2d(x, 2, 2)
        out = P.route_maxpool(np.full((1, 1, 1, 1), 5.0), trace)
        assert np.array_equal(out[0, 0], [[0, 0], [0, 5]])

    def test_residual_equal_branches_split_half(self, rng):
        x = np.abs(rng.standard_normal((1, 2, 3, 3)))
        r = rng.standard_normal((1, 2, 3, 3))
        r_a, r_b = P.split_residual(r, x, x)
        assert np.allclose(r_a, r / 2) and np.allclose(r_b, r / 2)

    def test_residual_split_conserves_and_zeroes_dead(self, rng):
        a = rng.standard_normal((1, 2, 4, 4))
        b = rng.standard_normal((1, 2, 4, 4))
        a[0, 0, 0, 0] = b[0, 0, 0, 0] = 0.0
        r = rng.standard_normal((1, 2, 4, 4))
        r[0, 0, 0, 0] = 0.0  # dead position carries nothing
        r_a, r_b = P.split_residual(r, a, b)
        assert np.allclose(r_a + r_b, r)
        assert r_a[0, 0, 0, 0] == 0 and r_b[0, 0, 0, 0] == 0

    def test_avgpool_uniform_split(self):
        x = np.ones((1, 1, 2, 2), np.float32)
        out = P.route_avgpool(np.full((1, 1, 1, 1), 4.0), x, 2, 2)
        assert np.allclose(out, 1.0)

    def test_avgpool_skips_inactive_positions(self):
        x = np.array([[2, 0], [2, 0]], np.float32).reshape(1, 1, 2, 2)
        out = P.route_avgpool(np.full((1, 1, 1, 1), 4.0), x, 2, 2)
        assert np.allclose(out[0, 0], [[2, 0], [2, 0]])

    def test_relu_passthrough_restricted(self):
        x_in = np.array([1.0, -1.0, 0.0])
        out = P.route_relu(np.array([5.0, 5.0, 5.0]), x_in)
        assert np.array_equal(out, [5.0, 0.0, 0.0])

    def test_gap_split_conserves(self, rng):
        x = np.maximum(rng.standard_normal((1, 3, 4, 4)), 0)
        r = rng.standard_normal((1, 3))
        r = r * (x.sum(axis=(2, 3)) > 0)
        out = P.route_gap(r, x)
        assert np.allclose(out.sum(axis=(2, 3)), r)


class TestZbetaInput:
    def test_identity_case(self):
        layer = LayerSpec("c", "conv", ("input",), out_channels=1, kernel=(1, 1))
        geom = T.ConvGeometry(1, 1, 1, 1)
        x = np.full((1, 1, 1, 1), 0.5, np.float32)
        w = np.ones((1, 1, 1, 1), np.float32)
        for r in (0.7, -0.3):
            rel = SectionedRelevanceMap.from_values(np.full((1, 1, 1, 1), r))
            out = P.zbeta_input(x, layer, w, rel, np.zeros(1), np.ones(1), geom=geom)
            assert np.allclose(out, r, atol=1e-8)

    def test_zero_relevance_zero_pixels(self):
        layer = LayerSpec("c", "conv", ("input",), out_channels=1, kernel=(1, 1))
        geom = T.ConvGeometry(1, 1, 1, 1)
        rel = SectionedRelevanceMap.from_values(np.zeros((1, 1, 1, 1)))
        out = P.zbeta_input(np.ones((1, 1, 1, 1), np.float32), layer,
                            np.ones((1, 1, 1, 1), np.float32), rel,
                            np.zeros(1), np.ones(1), geom=geom)
        assert not out.any()

    def test_sections_conserved_separately(self, rng):
        geom = T.ConvGeometry(2, 3, 3, 3, padding=1)
        layer = LayerSpec("c", "conv", ("input",), out_channels=3, kernel=(3, 3), padding=1)
        x = rng.uniform(0.05, 1.0, (1, 2, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        z = T.conv2d_f64(x, w, None, geom)
        values = np.where(z > 0, np.abs(rng.standard_normal(z.shape)), 0.0)
        rel = SectionedRelevanceMap.from_values(values)
        out = P.zbeta_input(x, layer, w, rel, np.zeros(2), np.ones(2), geom=geom)
        assert abs(float(out.sum()) - rel.total()) <= 1e-4 * abs(rel.total())

    def test_non_conv_first_layer_rejected(self):
        rel = SectionedRelevanceMap.from_values(np.zeros((1, 1, 1, 1)))
        with pytest.raises(P.PropagationError, match="conv first layer"):
            P.zbeta_input(np.ones((1, 1, 1, 1), np.float32),
                          LayerSpec("r", "relu", ("input",)),
                          np.ones((1, 1, 1, 1), np.float32), rel, np.zeros(1), np.ones(1))


class TestRunRsp:
    def test_two_quadrant_signs(self):
        model, weights = toys.two_quadrant_model()
        for seed in range(5):
            image, ann = toys.two_quadrant_sample(np.random.default_rng(seed), "img")
            res = P.run_rsp(model, weights, image, ClassSpec(target=0, hostiles=(1,)))
            assert res.conserved()
            assert res.pixel_map[toys.TARGET_QUADRANT].sum() > 0
            assert res.pixel_map[toys.HOSTILE_QUADRANT].sum() < 0

    def test_argmax_inside_object_without_hostiles(self):
        model, weights = toys.two_quadrant_model()
        image, ann = toys.two_quadrant_sample(np.random.default_rng(42), "img")
        res = P.run_rsp(model, weights, image, ClassSpec(target=0))
        y, x = np.unravel_index(np.argmax(res.pixel_map), res.pixel_map.shape)
        (x0, y0, x1, y1) = ann.boxes[0][0]
        assert x0 <= x <= x1 and y0 <= y <= y1

    def test_swapped_target_flips_region_sums(self):
        model, weights = toys.two_quadrant_model()
        image, _ = toys.two_quadrant_sample(np.random.default_rng(3), "img")
        fwd = P.run_rsp(model, weights, image, ClassSpec(target=0, hostiles=(1,)))
        rev = P.run_rsp(model, weights, image, ClassSpec(target=1, hostiles=(0,)))
        assert fwd.pixel_map[toys.TARGET_QUADRANT].sum() > 0 > rev.pixel_map[toys.TARGET_QUADRANT].sum()
        assert fwd.pixel_map[toys.HOSTILE_QUADRANT].sum() < 0 < rev.pixel_map[toys.HOSTILE_QUADRANT].sum()

    def test_conservation_with_and_without_per_layer_purge(self):
        model, weights, image = toys.sanity_toy_net(4)
        trace = M.forward_trace(model, weights, image)
        spec = ClassSpec(target=int(np.argmax(trace.logits)), hostiles=(0,))
        for purge_on in (True, False):
            cfg = P.PropagationConfig(per_layer_purge=purge_on)
            res = P.run_rsp(model, weights, image, spec, cfg, trace=trace)
            assert res.conserved(), f"per_layer_purge={purge_on}"

    def test_inactive_neurons_carry_zero(self):
        model, weights, image = toys.sanity_toy_net(6)
        trace = M.forward_trace(model, weights, image)
        spec = ClassSpec(target=int(np.argmax(trace.logits)))
        res = P.run_rsp(model, weights, image, spec, trace=trace)
        for row in res.audit:
            if row.layer == "input":
                continue
            x = trace.outputs[row.layer]
            assert not res.conserved() or not row.relevance.values[x == 0].any()

    def test_homogeneity_of_pixel_map(self):
        model, weights, image = toys.sanity_toy_net(0)
        trace = M.forward_trace(model, weights, image)
        spec = ClassSpec(target=int(np.argmax(trace.logits)), hostiles=(0,))
        base = P.run_rsp(model, weights, image, spec, trace=trace)
        c = 5.5
        scaled = P.run_rsp(model, weights, image, spec, trace=trace, initial_scale=c)
        assert rel_err(scaled.pixel_map, c * base.pixel_map) <= 1e-5
        assert np.argmax(scaled.pixel_map) == np.argmax(base.pixel_map)

    def test_section_masks_stay_disjoint(self):
        model, weights, image = toys.sanity_toy_net(8)
        res = P.run_rsp(model, weights, image, ClassSpec(target=1, hostiles=(0, 2)))
        for row in res.audit:
            assert not np.logical_and(row.relevance.mask_pos, row.relevance.mask_neg).any()
            vals = row.relevance.values
            assert not (vals > 0)[~row.relevance.mask_pos].any()
            assert not (vals < 0)[~row.relevance.mask_neg].any()

    def test_audit_covers_feature_stage_and_input(self):
        model, weights, image = toys.sanity_toy_net(0)
        trace = M.forward_trace(model, weights, image)
        target = int(np.argmax(trace.logits))
        res = P.run_rsp(model, weights, image, ClassSpec(target=target), trace=trace)
        names = [row.layer for row in res.audit]
        assert names[-1] == "input"
        assert "pool2" in names and "relu2" in names and "relu1" in names
