"""Model descriptors and graph execution.

A model is an ordered DAG of layers over named tensors.  The descriptor is
stored as a versioned JSON document ("rsp-model/1"); weights live in a
separate archive keyed by the layers' weight_refs.  Execution records every
layer's post-activation output (an ActivationTrace), which downstream
attribution consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T

FORMAT = "rsp-model/1"
INPUT = "input"  # reserved tensor name for the (normalized) image

LAYER_KINDS = {
    "conv", "linear", "relu", "maxpool", "avgpool",
    "global_avg_pool", "flatten", "residual_add", "batchnorm",
}

# Deterministic per-kind ordering of weight roles (used by randomization).
WEIGHT_ROLES = {
    "conv": ("weight", "bias"),
    "linear": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
}

__all__ = ["ModelError", "LayerSpec", "ModelDescriptor", "ActivationTrace",
           "load_descriptor", "save_descriptor", "forward_trace",
           "output_gradients", "fold_batchnorm", "randomize_cascading"]


class ModelError(ValueError):
    """Descriptor/graph problem; the message names the offending layer."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    weight_refs: dict[str, str] = field(default_factory=dict)
    out_channels: int | None = None          # conv
    kernel: tuple[int, int] | int | None = None  # conv: (kh, kw); pools: int
    stride: int = 1
    padding: int = 0
    out_features: int | None = None          # linear
    eps: float = 1e-5                        # batchnorm


@dataclass
class ModelDescriptor:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]        # (C, H, W)
    class_names: list[str]
    normalization: tuple[np.ndarray, np.ndarray]  # per-channel (mean, std)
    feature_end: str

    def __post_init__(self):
        self._by_name = {}
        for layer in self.layers:
            if layer.name == INPUT:
                raise ModelError(f"layer name '{INPUT}' is reserved")
            if layer.name in self._by_name:
                raise ModelError(f"duplicate layer name '{layer.name}'")
            if layer.kind not in LAYER_KINDS:
                raise ModelError(f"layer '{layer.name}': unknown kind '{layer.kind}'")
            for src in layer.inputs:
                if src != INPUT and src not in self._by_name:
                    raise ModelError(
                        f"layer '{layer.name}': input '{src}' is not an earlier layer"
                    )
            n_in = len(layer.inputs)
            if layer.kind == "residual_add":
                if n_in != 2:
                    raise ModelError(f"layer '{layer.name}': residual_add needs 2 inputs, got {n_in}")
            elif n_in != 1:
                raise ModelError(f"layer '{layer.name}': expected 1 input, got {n_in}")
            self._by_name[layer.name] = layer
        consumed = {src for layer in self.layers for src in layer.inputs}
        sinks = [l.name for l in self.layers if l.name not in consumed]
        if len(sinks) != 1:
            raise ModelError(f"graph must have a single output layer, found {sinks}")
        self.output_layer = sinks[0]
        if self.feature_end not in self._by_name:
            raise ModelError(f"feature_end '{self.feature_end}' is not a layer")
        if self._by_name[self.feature_end].kind not in ("conv", "relu"):
            raise ModelError(f"feature_end '{self.feature_end}' must be a conv or relu layer")
        mean, std = self.normalization
        mean = np.asarray(mean, dtype=np.float32)
        std = np.asarray(std, dtype=np.float32)
        if mean.shape != (self.input_shape[0],) or std.shape != (self.input_shape[0],):
            raise ModelError("normalization mean/std must have one entry per input channel")
        if np.any(std <= 0):
            raise ModelError("normalization std must be positive")
        self.normalization = (mean, std)
        self._shapes = self._infer_shapes()
        if len(self._shapes[self.feature_end]) != 4:
            raise ModelError(f"feature_end '{self.feature_end}' must produce a 4-D map")
        out_shape = self._shapes[self.output_layer]
        if len(out_shape) != 2:
            raise ModelError(f"output layer '{self.output_layer}' must produce (N, classes)")
        if out_shape[1] != len(self.class_names):
            raise ModelError(
                f"{len(self.class_names)} class names but output dimension {out_shape[1]}"
            )

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise ModelError(f"unknown layer '{name}'") from None

    def output_shape(self, name: str) -> tuple:
        if name == INPUT:
            return (1, *self.input_shape)
        return self._shapes[name]

    def consumers(self, name: str) -> list[LayerSpec]:
        return [l for l in self.layers if name in l.inputs]

    def conv_geometry(self, layer: LayerSpec) -> T.ConvGeometry:
        in_shape = self.output_shape(layer.inputs[0])
        kh, kw = layer.kernel
        return T.ConvGeometry(in_channels=in_shape[1], out_channels=layer.out_channels,
                              kernel_h=kh, kernel_w=kw, stride=layer.stride, padding=layer.padding)

    def expected_weight_shape(self, layer: LayerSpec, role: str):
        in_shape = self.output_shape(layer.inputs[0])
        if layer.kind == "conv":
            kh, kw = layer.kernel
            if role == "weight":
                return (layer.out_channels, in_shape[1], kh, kw)
            if role == "bias":
                return (layer.out_channels,)
        elif layer.kind == "linear":
            if role == "weight":
                return (layer.out_features, in_shape[1])
            if role == "bias":
                return (layer.out_features,)
        elif layer.kind == "batchnorm":
            if role in ("gamma", "beta", "mean", "var"):
                return (in_shape[1],)
        return None

    def _infer_shapes(self) -> dict[str, tuple]:
        shapes: dict[str, tuple] = {INPUT: (1, *self.input_shape)}
        for layer in self.layers:
            ins = [shapes[s] for s in layer.inputs]
            try:
                shapes[layer.name] = _infer_one(layer, ins)
            except T.ShapeError as e:
                raise ModelError(f"layer '{layer.name}': {e}") from None
        return shapes


def _infer_one(layer: LayerSpec, ins: list[tuple]) -> tuple:
    x = ins[0]
    if layer.kind == "conv":
        if len(x) != 4:
            raise T.ShapeError(f"conv input must be 4-D, got {x}")
        kh, kw = layer.kernel
        geom = T.ConvGeometry(x[1], layer.out_channels, kh, kw, layer.stride, layer.padding)
        oh, ow = geom.out_size(x[2], x[3])
        return (x[0], layer.out_channels, oh, ow)
    if layer.kind == "linear":
        if len(x) != 2:
            raise T.ShapeError(f"linear input must be 2-D, got {x}")
        return (x[0], layer.out_features)
    if layer.kind in ("relu", "batchnorm"):
        if layer.kind == "batchnorm" and len(x) != 4:
            raise T.ShapeError(f"batchnorm input must be 4-D, got {x}")
        return x
    if layer.kind in ("maxpool", "avgpool"):
        if len(x) != 4:
            raise T.ShapeError(f"pool input must be 4-D, got {x}")
        k, s, p = layer.kernel, layer.stride, layer.padding
        if layer.kind == "avgpool" and p:
            raise T.ShapeError("avgpool does not support padding")
        oh = (x[2] + 2 * p - k) // s + 1
        ow = (x[3] + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise T.ShapeError(f"pool output {oh}x{ow} < 1")
        return (x[0], x[1], oh, ow)
    if layer.kind == "global_avg_pool":
        if len(x) != 4:
            raise T.ShapeError(f"global_avg_pool input must be 4-D, got {x}")
        return (x[0], x[1])
    if layer.kind == "flatten":
        return (x[0], int(np.prod(x[1:])))
    if layer.kind == "residual_add":
        if x != ins[1]:
            raise T.ShapeError(f"residual_add inputs differ: {x} vs {ins[1]}")
        return x
    raise T.ShapeError(f"unknown kind '{layer.kind}'")


# ---------------------------------------------------------------------------
# descriptor JSON

def descriptor_to_json(model: ModelDescriptor) -> str:
    mean, std = model.normalization
    layers = []
    for l in model.layers:
        d: dict = {"name": l.name, "kind": l.kind, "inputs": list(l.inputs)}
        if l.kind == "conv":
            d.update(out_channels=l.out_channels, kernel=list(l.kernel),
                     stride=l.stride, padding=l.padding)
        elif l.kind == "linear":
            d.update(out_features=l.out_features)
        elif l.kind in ("maxpool", "avgpool"):
            d.update(kernel=l.kernel, stride=l.stride)
            if l.kind == "maxpool":
                d.update(padding=l.padding)
        elif l.kind == "batchnorm":
            d.update(eps=l.eps)
        if l.weight_refs:
            d["weights"] = dict(l.weight_refs)
        layers.append(d)
    doc = {
        "format": FORMAT,
        "input_shape": list(model.input_shape),
        "class_names": list(model.class_names),
        "normalization": {"mean": [float(v) for v in mean], "std": [float(v) for v in std]},
        "feature_end": model.feature_end,
        "layers": layers,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def descriptor_from_json(text: str) -> ModelDescriptor:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"descriptor is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelError(f"descriptor format must be '{FORMAT}', got {doc.get('format')!r}")
    layers = []
    for entry in doc["layers"]:
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ModelError(f"layer '{entry.get('name')}': unknown kind '{kind}'")
        kernel = entry.get("kernel")
        if kind == "conv":
            kernel = (int(kernel[0]), int(kernel[1]))
        layers.append(LayerSpec(
            name=entry["name"], kind=kind, inputs=tuple(entry["inputs"]),
            weight_refs=dict(entry.get("weights", {})),
            out_channels=entry.get("out_channels"), kernel=kernel,
            stride=int(entry.get("stride", 1)), padding=int(entry.get("padding", 0)),
            out_features=entry.get("out_features"), eps=float(entry.get("eps", 1e-5)),
        ))
    norm = doc["normalization"]
    return ModelDescriptor(
        layers=layers,
        input_shape=tuple(int(v) for v in doc["input_shape"]),
        class_names=list(doc["class_names"]),
        normalization=(np.asarray(norm["mean"], dtype=np.float32),
                       np.asarray(norm["std"], dtype=np.float32)),
        feature_end=doc["feature_end"],
    )


def load_descriptor(path) -> ModelDescriptor:
    with open(path, "r", encoding="utf-8") as f:
        return descriptor_from_json(f.read())


def save_descriptor(model: ModelDescriptor, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(descriptor_to_json(model))


# ---------------------------------------------------------------------------
# execution

@dataclass
class ActivationTrace:
    """Per-layer post-activation outputs of one forward pass (batch of 1)."""

    outputs: dict[str, np.ndarray]           # tensor name -> value, includes INPUT
    pool_traces: dict[str, T.ArgmaxTrace]
    logits: np.ndarray                       # (classes,) pre-final-activation


def _weight(weights, layer: LayerSpec, role: str) -> np.ndarray:
    ref = layer.weight_refs.get(role)
    if ref is None:
        return None
    if ref not in weights:
        raise ModelError(f"layer '{layer.name}': weight_ref '{ref}' missing from archive")
    return weights[ref]


def normalize_image(model: ModelDescriptor, image: np.ndarray) -> np.ndarray:
    if tuple(image.shape) != tuple(model.input_shape):
        raise ModelError(f"image shape {image.shape} != model input_shape {model.input_shape}")
    mean, std = model.normalization
    x = (image.astype(np.float32) - mean[:, None, None]) / std[:, None, None]
    return x[None, ...]


def forward_trace(model: ModelDescriptor, weights, image: np.ndarray) -> ActivationTrace:
    """Run the graph on one (C,H,W) image, recording every layer output."""
    outputs: dict[str, np.ndarray] = {INPUT: normalize_image(model, image)}
    pool_traces: dict[str, T.ArgmaxTrace] = {}
    for layer in model.layers:
        xs = [outputs[s] for s in layer.inputs]
        try:
            outputs[layer.name], ptrace = _forward_one(model, layer, xs, weights)
        except T.ShapeError as e:
            raise ModelError(f"layer '{layer.name}': {e}") from None
        if ptrace is not None:
            pool_traces[layer.name] = ptrace
    logits = outputs[model.output_layer].reshape(-1).copy()
    return ActivationTrace(outputs=outputs, pool_traces=pool_traces, logits=logits)


def _forward_one(model, layer: LayerSpec, xs, weights):
    x = xs[0]
    if layer.kind == "conv":
        geom = model.conv_geometry(layer)
        return T.conv2d(x, _required(weights, layer, "weight"), _weight(weights, layer, "bias"), geom), None
    if layer.kind == "linear":
        return T.linear(x, _required(weights, layer, "weight"), _weight(weights, layer, "bias")), None
    if layer.kind == "relu":
        return np.maximum(x, 0.0), None
    if layer.kind == "maxpool":
        out, trace = T.maxpool2d(x, layer.kernel, layer.stride, layer.padding)
        return out, trace
    if layer.kind == "avgpool":
        return T.avgpool2d(x, layer.kernel, layer.stride), None
    if layer.kind == "global_avg_pool":
        return T.global_avg_pool(x), None
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    if layer.kind == "residual_add":
        if xs[0].shape != xs[1].shape:
            raise T.ShapeError(f"residual_add inputs differ: {xs[0].shape} vs {xs[1].shape}")
        return (xs[0].astype(np.float64) + xs[1].astype(np.float64)).astype(np.float32), None
    if layer.kind == "batchnorm":
        gamma = _required(weights, layer, "gamma")
        beta = _required(weights, layer, "beta")
        mean = _required(weights, layer, "mean")
        var = _required(weights, layer, "var")
        scale = (gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + layer.eps))
        y = (x.astype(np.float64) - mean.astype(np.float64)[None, :, None, None]) * scale[None, :, None, None]
        return (y + beta.astype(np.float64)[None, :, None, None]).astype(np.float32), None
    raise ModelError(f"layer '{layer.name}': unknown kind '{layer.kind}'")


def _required(weights, layer: LayerSpec, role: str) -> np.ndarray:
    t = _weight(weights, layer, role)
    if t is None:
        raise ModelError(f"layer '{layer.name}': missing required weight role '{role}'")
    return t


def output_gradients(model: ModelDescriptor, weights, trace: ActivationTrace,
                     logit_cotangent: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of <logits, cotangent> w.r.t. every layer output and the input.

    One reverse sweep over the graph; float64 accumulation, float32 maps.
    """
    grads: dict[str, np.ndarray] = {
        model.output_layer: np.asarray(logit_cotangent, dtype=np.float64).reshape(
            trace.outputs[model.output_layer].shape)
    }
    for layer in reversed(model.layers):
        g_out = grads.get(layer.name)
        if g_out is None:
            continue
        for src, g_in in _backward_one(model, layer, trace, weights, g_out):
            if src in grads:
                grads[src] = grads[src] + g_in
            else:
                grads[src] = g_in
    return {name: g.astype(np.float32) for name, g in grads.items()}


def _backward_one(model, layer: LayerSpec, trace, weights, g_out):
    src = layer.inputs[0]
    x_in = trace.outputs[src]
    if layer.kind == "conv":
        geom = model.conv_geometry(layer)
        w = _required(weights, layer, "weight")
        yield src, T.conv2d_input_vjp_f64(g_out.astype(np.float32), w, geom, x_in.shape)
    elif layer.kind == "linear":
        w = _required(weights, layer, "weight")
        yield src, np.matmul(g_out, w.astype(np.float64))
    elif layer.kind == "relu":
        yield src, g_out * (trace.outputs[layer.name] > 0)
    elif layer.kind == "maxpool":
        yield src, T.maxpool2d_vjp(g_out.astype(np.float32), trace.pool_traces[layer.name]).astype(np.float64)
    elif layer.kind == "avgpool":
        yield src, T.avgpool2d_vjp(g_out.astype(np.float32), x_in.shape, layer.kernel, layer.stride).astype(np.float64)
    elif layer.kind == "global_avg_pool":
        yield src, T.global_avg_pool_vjp(g_out.astype(np.float32), x_in.shape).astype(np.float64)
    elif layer.kind == "flatten":
        yield src, g_out.reshape(x_in.shape)
    elif layer.kind == "residual_add":
        yield layer.inputs[0], g_out
        yield layer.inputs[1], g_out.copy()
    elif layer.kind == "batchnorm":
        gamma = _required(weights, layer, "gamma").astype(np.float64)
        var = _required(weights, layer, "var").astype(np.float64)
        scale = gamma / np.sqrt(var + layer.eps)
        yield src, g_out * scale[None, :, None, None]
    else:
        raise ModelError(f"layer '{layer.name}': unknown kind '{layer.kind}'")


# ---------------------------------------------------------------------------
# transforms

def fold_batchnorm(model: ModelDescriptor, weights) -> tuple[ModelDescriptor, dict]:
    """Fold every batchnorm into its producing conv; forward outputs unchanged.

    The conv must feed only the batchnorm (true for the supported
    architectures); a batchnorm fed by anything else is an error.
    """
    new_weights = dict(weights)
    layers = list(model.layers)
    feature_end = model.feature_end
    while True:
        bn = next((l for l in layers if l.kind == "batchnorm"), None)
        if bn is None:
            break
        conv = next((l for l in layers if l.name == bn.inputs[0]), None)
        if conv is None or conv.kind != "conv":
            raise ModelError(f"layer '{bn.name}': batchnorm input is not a conv layer")
        other = [l.name for l in layers if conv.name in l.inputs and l.name != bn.name]
        if other:
            raise ModelError(
                f"layer '{bn.name}': conv '{conv.name}' also feeds {other}, cannot fold"
            )
        gamma = new_weights[bn.weight_refs["gamma"]].astype(np.float64)
        beta = new_weights[bn.weight_refs["beta"]].astype(np.float64)
        mean = new_weights[bn.weight_refs["mean"]].astype(np.float64)
        var = new_weights[bn.weight_refs["var"]].astype(np.float64)
        scale = gamma / np.sqrt(var + bn.eps)
        w_ref = conv.weight_refs["weight"]
        w = new_weights[w_ref].astype(np.float64)
        b_ref = conv.weight_refs.get("bias")
        b = new_weights[b_ref].astype(np.float64) if b_ref else np.zeros(w.shape[0])
        new_weights[w_ref] = (w * scale[:, None, None, None]).astype(np.float32)
        if b_ref is None:
            b_ref = f"{conv.name}.bias"
            while b_ref in new_weights:
                b_ref += "+"
        new_weights[b_ref] = ((b - mean) * scale + beta).astype(np.float32)
        for role in ("gamma", "beta", "mean", "var"):
            new_weights.pop(bn.weight_refs[role], None)
        folded_conv = replace(conv, weight_refs={"weight": w_ref, "bias": b_ref})
        rewired = []
        for l in layers:
            if l.name == bn.name:
                continue
            if l.name == conv.name:
                rewired.append(folded_conv)
                continue
            if bn.name in l.inputs:
                l = replace(l, inputs=tuple(conv.name if s == bn.name else s for s in l.inputs))
            rewired.append(l)
        if feature_end == bn.name:
            feature_end = conv.name
        layers = rewired
    folded = ModelDescriptor(layers=layers, input_shape=model.input_shape,
                             class_names=list(model.class_names),
                             normalization=model.normalization, feature_end=feature_end)
    return folded, new_weights


def randomize_cascading(model: ModelDescriptor, weights, from_layer: str, seed: int) -> dict:
    """Re-initialize all learnable tensors from the output layer back through
    ``from_layer`` (inclusive) with seeded N(0, 1/fan_in) draws.

    Earlier layers keep their tensors untouched; batchnorm running statistics
    are preserved (re-drawn variances could go negative).  Deterministic for a
    fixed seed.
    """
    names = [l.name for l in model.layers]
    if from_layer not in names:
        raise ModelError(f"unknown layer '{from_layer}'")
    cutoff = names.index(from_layer)
    rng = np.random.default_rng(seed)
    new_weights = dict(weights)
    for idx, layer in enumerate(model.layers):
        if idx < cutoff:
            continue
        for role in WEIGHT_ROLES.get(layer.kind, ()):
            if role in ("mean", "var"):
                continue
            ref = layer.weight_refs.get(role)
            if ref is None:
                continue
            t = new_weights[ref]
            fan_in = int(np.prod(t.shape[1:])) if t.ndim >= 2 else 1
            new_weights[ref] = (rng.standard_normal(t.shape) / np.sqrt(fan_in)).astype(np.float32)
    return new_weights
