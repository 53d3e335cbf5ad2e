"""Backward relevance propagation from the feature-stage end layer to pixels.

The engine walks the layer graph in reverse topological order, carrying
sectioned relevance on tensors.  Weighted layers (conv/linear) propagate via
per-section weight-space gradients ("nu") followed by an influence-ratio
redistribution; pools route mass to their contributing inputs; relu, flatten
and residual_add move values without reshaping the distribution.  After each
mass-moving step the relevance is uniformly shifted (doubling minus an even
share of the layer sum over activated neurons), then re-purged and re-scaled
back onto the 2:-1 positive/negative split.  The first convolution hands off
to a box-constrained input rule.

Everything here works in float64 and snapshots to float32 for the audit and
the final pixel map.  The total relevance sum is preserved layer by layer;
the audit records it so callers can verify conservation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import relmap as RM
from . import tensor as T
from .relmap import ClassSpec, SectionedRelevanceMap

__all__ = ["PropagationError", "PropagationConfig", "LayerRelevance", "RspResult",
           "sectional_nu", "propagate_layer", "propagate_weightless",
           "uniform_shift", "zbeta_input", "run_rsp",
           "route_relu", "route_maxpool", "route_avgpool", "route_gap", "split_residual"]

# Layer kinds whose propagation genuinely redistributes mass onto a new
# activation tensor.  Arrivals through these trigger the uniform shift;
# relu / flatten / residual_add only transfer values.
_MOVING_KINDS = {"conv", "linear", "maxpool", "avgpool", "global_avg_pool"}


class PropagationError(ValueError):
    pass


@dataclass
class PropagationConfig:
    """Knobs for the backward engine.

    zbeta bounds default to the admissible normalized-pixel box implied by
    the model's normalization: per channel, (0 - mean)/std .. (1 - mean)/std.
    """

    epsilon: float = 1e-9
    zbeta_low: np.ndarray | None = None    # per input channel
    zbeta_high: np.ndarray | None = None
    per_layer_purge: bool = True
    conservation_tolerance: float = 1e-4

    def __post_init__(self):
        if self.epsilon <= 0:
            raise PropagationError(f"epsilon must be positive, got {self.epsilon}")

    def resolve_bounds(self, model: M.ModelDescriptor) -> tuple[np.ndarray, np.ndarray]:
        mean, std = model.normalization
        low = self.zbeta_low if self.zbeta_low is not None else (0.0 - mean) / std
        high = self.zbeta_high if self.zbeta_high is not None else (1.0 - mean) / std
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        if low.shape != (model.input_shape[0],) or high.shape != (model.input_shape[0],):
            raise PropagationError("zbeta bounds need one value per input channel")
        if np.any(low >= high):
            raise PropagationError("zbeta_low must be < zbeta_high per channel")
        return low, high


@dataclass
class LayerRelevance:
    """Audit row: relevance state right after the shift at one tensor."""

    layer: str
    relevance: SectionedRelevanceMap
    layer_sum: float      # this tensor's own relevance mass
    frontier_sum: float   # total mass still alive anywhere (== layer_sum on chains)
    ok: bool


@dataclass
class RspResult:
    pixel_map: np.ndarray                 # (H, W) float32, channel-summed
    pixel_relevance: np.ndarray           # (1, C, H, W) float32
    audit: list[LayerRelevance]
    start: SectionedRelevanceMap          # normalized relevance at feature_end

    def conserved(self) -> bool:
        return all(row.ok for row in self.audit)


def _stabilized(d: np.ndarray, epsilon: float) -> np.ndarray:
    """Sign-preserving denominator guard: d -> d + eps*sign(d), sign(0) = +1."""
    return np.where(d >= 0, d + epsilon, d - epsilon)


def sectional_nu(x: np.ndarray, layer: M.LayerSpec, relevance: SectionedRelevanceMap,
                 geom: T.ConvGeometry | None = None):
    """Per-section weight-space gradients: the correlation between each
    weight and the masked forward contribution, weighted by the section's
    relevance.  Shapes equal the layer's weight shape."""
    p = relevance.positive.astype(np.float64)
    n = relevance.negative.astype(np.float64)
    if layer.kind == "conv":
        if geom is None:
            raise PropagationError(f"layer '{layer.name}': conv geometry required")
        nu_p = T.conv2d_weight_grad_f64(p, x, geom)
        nu_n = T.conv2d_weight_grad_f64(n, x, geom)
    elif layer.kind == "linear":
        nu_p = T.linear_weight_grad_f64(p, x)
        nu_n = T.linear_weight_grad_f64(n, x)
    else:
        raise PropagationError(f"layer '{layer.name}' ({layer.kind}) has no weights; "
                               "use propagate_weightless")
    return nu_p, nu_n


def propagate_layer(x: np.ndarray, layer: M.LayerSpec, nu_p: np.ndarray, nu_n: np.ndarray,
                    relevance: SectionedRelevanceMap, epsilon: float = 1e-9,
                    geom: T.ConvGeometry | None = None) -> np.ndarray:
    """Influence redistribution through a weighted layer.

    For each section: forward the input through the section's nu, divide the
    section relevance by that response (stabilized), pull the ratios back
    with the input-space vJp of nu, and weight by the input.  The result
    sums to the incoming relevance up to the epsilon guards.
    """
    x64 = x.astype(np.float64)
    total = np.zeros_like(x64)
    for nu, sec in ((nu_p, relevance.positive), (nu_n, relevance.negative)):
        sec64 = sec.astype(np.float64)
        if not np.any(sec64):
            continue
        nu64 = nu.astype(np.float64)
        if layer.kind == "conv":
            z = T.conv2d_f64(x64, nu64, None, geom)
            s = sec64 / _stabilized(z, epsilon)
            total += x64 * T.conv2d_input_vjp_f64(s, nu64, geom, x64.shape)
        elif layer.kind == "linear":
            z = T.linear_f64(x64, nu64, None)
            s = sec64 / _stabilized(z, epsilon)
            total += x64 * T.linear_input_vjp_f64(s, nu64)
        else:
            raise PropagationError(f"layer '{layer.name}' ({layer.kind}) has no weights")
    return total


def route_relu(r: np.ndarray, x_in: np.ndarray) -> np.ndarray:
    """Pass-through restricted to activated units."""
    return np.where(x_in > 0, r, 0.0)


def route_maxpool(r: np.ndarray, trace: T.ArgmaxTrace) -> np.ndarray:
    """Winner-take-all: each relevance entry lands on its recorded argmax."""
    n, c, h, w = trace.input_shape
    out = np.zeros((n, c, h * w), dtype=np.float64)
    np.add.at(out, (np.arange(n)[:, None, None], np.arange(c)[None, :, None],
                    trace.indices.reshape(n, c, -1)),
              r.astype(np.float64).reshape(n, c, -1))
    return out.reshape(n, c, h, w)


def route_avgpool(r: np.ndarray, x_in: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Uniform split of each window's relevance across its contributing
    (nonzero) positions."""
    n, c, h, w = x_in.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    nz = (x_in != 0)
    counts = np.zeros((n, c, oh, ow), dtype=np.int64)
    for i in range(kernel):
        for j in range(kernel):
            counts += nz[:, :, i : i + stride * (oh - 1) + 1 : stride,
                         j : j + stride * (ow - 1) + 1 : stride]
    share = np.where(counts > 0, r.astype(np.float64) / np.maximum(counts, 1), 0.0)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            sl = np.s_[:, :, i : i + stride * (oh - 1) + 1 : stride,
                       j : j + stride * (ow - 1) + 1 : stride]
            out[sl] += share * nz[sl]
    return out


def route_gap(r: np.ndarray, x_in: np.ndarray) -> np.ndarray:
    """Uniform split of per-channel relevance across that channel's
    contributing (nonzero) positions."""
    nz = (x_in != 0)
    counts = nz.sum(axis=(2, 3))
    share = np.where(counts > 0, r.astype(np.float64) / np.maximum(counts, 1), 0.0)
    return share[:, :, None, None] * nz


def split_residual(r: np.ndarray, x_a: np.ndarray, x_b: np.ndarray):
    """Split relevance between two branches proportionally to each branch's
    contribution magnitude; a position where both branches are zero carries
    no relevance, so both shares are zero there."""
    a = np.abs(x_a.astype(np.float64))
    b = np.abs(x_b.astype(np.float64))
    d = a + b
    safe = np.where(d > 0, d, 1.0)
    r64 = r.astype(np.float64)
    w_a = np.where(d > 0, a / safe, 0.0)
    w_b = np.where(d > 0, b / safe, 0.0)
    return r64 * w_a, r64 * w_b


def propagate_weightless(model: M.ModelDescriptor, layer: M.LayerSpec,
                         trace: M.ActivationTrace, r: np.ndarray):
    """Dispatch relevance through a weight-free layer.

    Returns a list of (source tensor name, contribution) pairs.
    """
    src = layer.inputs[0]
    if layer.kind == "relu":
        return [(src, route_relu(r, trace.outputs[src]))]
    if layer.kind == "maxpool":
        return [(src, route_maxpool(r, trace.pool_traces[layer.name]))]
    if layer.kind == "avgpool":
        return [(src, route_avgpool(r, trace.outputs[src], layer.kernel, layer.stride))]
    if layer.kind == "global_avg_pool":
        return [(src, route_gap(r, trace.outputs[src]))]
    if layer.kind == "flatten":
        return [(src, np.asarray(r, dtype=np.float64).reshape(trace.outputs[src].shape))]
    if layer.kind == "residual_add":
        src_b = layer.inputs[1]
        r_a, r_b = split_residual(r, trace.outputs[src], trace.outputs[src_b])
        return [(src, r_a), (src_b, r_b)]
    raise PropagationError(f"layer '{layer.name}': no weightless rule for kind '{layer.kind}'")


def uniform_shift(r_hat: np.ndarray, x: np.ndarray, total: float) -> np.ndarray:
    """Double the relevance and subtract an even share of ``total`` from every
    activated neuron; inactive neurons keep their (zero) doubled value.  The
    sum is preserved exactly in exact arithmetic."""
    activated = x > 0
    gamma = int(activated.sum())
    if gamma == 0:
        raise PropagationError("dead layer: no activated neurons to shift over")
    out = 2.0 * r_hat.astype(np.float64)
    out[activated] -= total / gamma
    return out


def zbeta_input(x_input: np.ndarray, first_layer: M.LayerSpec, weight: np.ndarray,
                relevance: SectionedRelevanceMap, low: np.ndarray, high: np.ndarray,
                epsilon: float = 1e-9, geom: T.ConvGeometry | None = None) -> np.ndarray:
    """Box-constrained decomposition onto pixels through the first conv.

    z = conv(x, w) - conv(low, w+) - conv(high, w-); each section's relevance
    is divided by z and pulled back through the three kernels, conserving the
    section sums.  Bias is excluded, matching the hidden-layer rule.
    """
    if first_layer.kind != "conv":
        raise PropagationError(
            f"layer '{first_layer.name}': input propagation requires a conv first layer, "
            f"got '{first_layer.kind}'")
    x64 = x_input.astype(np.float64)
    w64 = weight.astype(np.float64)
    w_pos = np.clip(w64, 0.0, None)
    w_neg = np.clip(w64, None, 0.0)
    lo_img = np.broadcast_to(low[None, :, None, None], x64.shape).astype(np.float64)
    hi_img = np.broadcast_to(high[None, :, None, None], x64.shape).astype(np.float64)
    z = (T.conv2d_f64(x64, w64, None, geom)
         - T.conv2d_f64(lo_img, w_pos, None, geom)
         - T.conv2d_f64(hi_img, w_neg, None, geom))
    zd = _stabilized(z, epsilon)
    pixel = np.zeros_like(x64)
    for sec in (relevance.positive, relevance.negative):
        sec64 = sec.astype(np.float64)
        if not np.any(sec64):
            continue
        s = sec64 / zd
        pixel += (x64 * T.conv2d_input_vjp_f64(s, w64, geom, x64.shape)
                  - lo_img * T.conv2d_input_vjp_f64(s, w_pos, geom, x64.shape)
                  - hi_img * T.conv2d_input_vjp_f64(s, w_neg, geom, x64.shape))
    return pixel


def _ancestors(model: M.ModelDescriptor, name: str) -> set[str]:
    seen = {name}
    stack = [name]
    while stack:
        for src in model.layer(stack.pop()).inputs:
            if src != M.INPUT and src not in seen:
                seen.add(src)
                stack.append(src)
    return seen


def run_rsp(model: M.ModelDescriptor, weights, image: np.ndarray, spec: ClassSpec,
            config: PropagationConfig | None = None, trace: M.ActivationTrace | None = None,
            initial_scale: float = 1.0) -> RspResult:
    """Full attribution pipeline for one image and one class spec.

    Batchnorm layers are folded away first.  The relative map at feature_end
    is purged, normalized onto the 2:-1 split (total ``initial_scale``), then
    propagated backward layer by layer down to a pixel map.  Every shift
    appends an audit row; conservation holds when every row's frontier total
    stays within ``conservation_tolerance`` of the initial total.
    """
    cfg = config or PropagationConfig()
    if any(l.kind == "batchnorm" for l in model.layers):
        model, weights = M.fold_batchnorm(model, weights)
        trace = None
    if initial_scale <= 0:
        raise PropagationError(f"initial relevance scale must be positive, got {initial_scale}")
    low, high = cfg.resolve_bounds(model)
    if trace is None:
        trace = M.forward_trace(model, weights, image)

    if spec.mode == "contrastive":
        f = RM.contrastive_relative_map(model, weights, trace, spec.target)
    else:
        f = RM.relative_map(model, weights, trace, spec)
    start = RM.normalize_sections(RM.purge(f), total=1.0)
    total = float(initial_scale)

    walk = _ancestors(model, model.feature_end)
    acc: dict[str, np.ndarray] = {model.feature_end: start.values.astype(np.float64) * total}
    moved: dict[str, bool] = {model.feature_end: False}
    pixel = np.zeros((1, *model.input_shape), dtype=np.float64)
    audit: list[LayerRelevance] = []
    tol = cfg.conservation_tolerance * abs(total)

    def frontier() -> float:
        return float(sum(a.sum() for a in acc.values()) + pixel.sum())

    for layer in reversed(model.layers):
        if layer.name not in walk or layer.name not in acc:
            continue
        r = acc.pop(layer.name)
        if moved.pop(layer.name, False):
            x_here = trace.outputs[layer.name]
            layer_sum = float(r.sum())
            if np.any(r) or np.any(x_here > 0):
                try:
                    r = uniform_shift(r, x_here, layer_sum)
                except PropagationError as e:
                    raise PropagationError(f"layer '{layer.name}': {e}") from None
            fr = frontier() + float(r.sum())
            snapshot = SectionedRelevanceMap.from_values(r.astype(np.float32))
            audit.append(LayerRelevance(layer=layer.name, relevance=snapshot,
                                        layer_sum=float(r.sum()), frontier_sum=fr,
                                        ok=abs(fr - total) <= tol))
            if cfg.per_layer_purge and r.ndim == 4 and layer_sum > 0:
                r = RM.normalize_sections(RM.purge(r), total=layer_sum).values.astype(np.float64)
        sections = SectionedRelevanceMap.from_values(r)
        try:
            contributions = _propagate_through(model, layer, trace, weights, sections,
                                               cfg, low, high)
        except (PropagationError, T.ShapeError, M.ModelError) as e:
            raise PropagationError(f"layer '{layer.name}': {e}") from None
        for dst, contrib, did_move in contributions:
            if dst == M.INPUT:
                pixel += contrib
                continue
            if dst in acc:
                acc[dst] = acc[dst] + contrib
            else:
                acc[dst] = contrib
            moved[dst] = moved.get(dst, False) or did_move

    if acc:
        raise PropagationError(f"relevance stranded on {sorted(acc)}")
    pixel_sum = float(pixel.sum())
    audit.append(LayerRelevance(
        layer=M.INPUT,
        relevance=SectionedRelevanceMap.from_values(pixel.astype(np.float32)),
        layer_sum=pixel_sum, frontier_sum=pixel_sum,
        ok=abs(pixel_sum - total) <= tol))
    return RspResult(pixel_map=pixel.sum(axis=(0, 1)).astype(np.float32),
                     pixel_relevance=pixel.astype(np.float32),
                     audit=audit, start=start)


def _propagate_through(model, layer, trace, weights, sections, cfg, low, high):
    src = layer.inputs[0]
    if layer.kind in ("conv", "linear"):
        x_in = trace.outputs[src]
        if layer.kind == "conv":
            geom = model.conv_geometry(layer)
            w = weights[layer.weight_refs["weight"]]
            if src == M.INPUT:
                contrib = zbeta_input(x_in, layer, w, sections, low, high, cfg.epsilon, geom)
                return [(M.INPUT, contrib, True)]
        else:
            geom = None
            if src == M.INPUT:
                raise PropagationError("input propagation requires a conv first layer, got 'linear'")
        nu_p, nu_n = sectional_nu(x_in, layer, sections, geom)
        r_hat = propagate_layer(x_in, layer, nu_p, nu_n, sections, cfg.epsilon, geom)
        return [(src, r_hat, True)]
    if src == M.INPUT:
        raise PropagationError(
            f"input propagation requires a conv first layer, got '{layer.kind}'")
    out = propagate_weightless(model, layer, trace, sections.values)
    did_move = layer.kind in _MOVING_KINDS
    return [(dst, contrib, did_move) for dst, contrib in out]
