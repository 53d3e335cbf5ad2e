"""torch -> rsp-model/1 descriptor + weight archive.

Dedicated walkers cover the two supported architecture families (VGG-16-like
feature/classifier stacks and ResNet-50-like bottleneck residual nets) plus
plain Sequential toy nets.  Batchnorm is exported unfused; the engine folds
it on load.  Every export is verified in-framework: the descriptor is
re-executed with torch functional ops and its logits compared against the
original module on probe images.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rspw import write_rspw

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

FORMAT = "rsp-model/1"


class ExportError(ValueError):
    pass


@dataclass
class ExportReport:
    layer_map: list[tuple[str, str]] = field(default_factory=list)   # torch path -> descriptor layer(s)
    tensor_shapes: list[tuple[str, tuple]] = field(default_factory=list)
    max_abs_logit_deviation: float = 0.0
    n_probes: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "layer_map": [{"module": m, "layer": l} for m, l in self.layer_map],
            "tensor_shapes": [{"name": n, "shape": list(s)} for n, s in self.tensor_shapes],
            "max_abs_logit_deviation": self.max_abs_logit_deviation,
            "n_probes": self.n_probes,
        }, indent=2, sort_keys=True) + "\n"


def _pair(v, what: str) -> int:
    if isinstance(v, (tuple, list)):
        if v[0] != v[1]:
            raise ExportError(f"{what}: asymmetric value {v} not supported")
        return int(v[0])
    return int(v)


class _Builder:
    """Accumulates descriptor layers and archive tensors during a walk."""

    def __init__(self):
        self.layers: list[dict] = []
        self.weights: dict[str, np.ndarray] = {}
        self.map: list[tuple[str, str]] = []

    def _tensor(self, name: str, value: torch.Tensor) -> str:
        self.weights[name] = value.detach().cpu().numpy().astype(np.float32)
        return name

    def conv(self, name: str, mod: nn.Conv2d, src: str) -> str:
        if mod.groups != 1:
            raise ExportError(f"{name}: grouped convolution unsupported")
        if _pair(mod.dilation, name) != 1:
            raise ExportError(f"{name}: dilation unsupported")
        refs = {"weight": self._tensor(f"{name}.weight", mod.weight)}
        if mod.bias is not None:
            refs["bias"] = self._tensor(f"{name}.bias", mod.bias)
        self.layers.append({
            "name": name, "kind": "conv", "inputs": [src], "weights": refs,
            "out_channels": int(mod.out_channels),
            "kernel": [int(mod.kernel_size[0]), int(mod.kernel_size[1])],
            "stride": _pair(mod.stride, name), "padding": _pair(mod.padding, name),
        })
        self.map.append((name, name))
        return name

    def batchnorm(self, name: str, mod: nn.BatchNorm2d, src: str) -> str:
        refs = {
            "gamma": self._tensor(f"{name}.weight", mod.weight),
            "beta": self._tensor(f"{name}.bias", mod.bias),
            "mean": self._tensor(f"{name}.running_mean", mod.running_mean),
            "var": self._tensor(f"{name}.running_var", mod.running_var),
        }
        self.layers.append({"name": name, "kind": "batchnorm", "inputs": [src],
                            "weights": refs, "eps": float(mod.eps)})
        self.map.append((name, name))
        return name

    def linear(self, name: str, mod: nn.Linear, src: str) -> str:
        refs = {"weight": self._tensor(f"{name}.weight", mod.weight)}
        if mod.bias is not None:
            refs["bias"] = self._tensor(f"{name}.bias", mod.bias)
        self.layers.append({"name": name, "kind": "linear", "inputs": [src],
                            "weights": refs, "out_features": int(mod.out_features)})
        self.map.append((name, name))
        return name

    def simple(self, name: str, kind: str, src: list[str], **params) -> str:
        self.layers.append({"name": name, "kind": kind, "inputs": src, **params})
        self.map.append((name, name))
        return name


def _walk_sequential(builder: _Builder, modules, src: str, prefix: str,
                     spatial: int) -> tuple[str, str | None, int]:
    """Exports an iterable of (index, module); returns (last tensor, last 4-D
    relu, spatial extent after the walk)."""
    last_relu = None
    for idx, mod in modules:
        name = f"{prefix}.{idx}" if prefix else str(idx)
        if isinstance(mod, nn.Conv2d):
            src = builder.conv(name, mod, src)
            spatial = (spatial + 2 * _pair(mod.padding, name) - _pair(mod.kernel_size, name)) \
                // _pair(mod.stride, name) + 1
        elif isinstance(mod, nn.BatchNorm2d):
            src = builder.batchnorm(name, mod, src)
        elif isinstance(mod, (nn.ReLU,)):
            src = builder.simple(name, "relu", [src])
            if spatial > 0:
                last_relu = src
        elif isinstance(mod, nn.MaxPool2d):
            if _pair(mod.dilation, name) != 1:
                raise ExportError(f"{name}: pool dilation unsupported")
            k, s, p = _pair(mod.kernel_size, name), _pair(mod.stride, name), _pair(mod.padding, name)
            src = builder.simple(name, "maxpool", [src], kernel=k, stride=s, padding=p)
            spatial = (spatial + 2 * p - k) // s + 1
        elif isinstance(mod, nn.AvgPool2d):
            k, s = _pair(mod.kernel_size, name), _pair(mod.stride or mod.kernel_size, name)
            if _pair(mod.padding, name) != 0:
                raise ExportError(f"{name}: padded average pooling unsupported")
            src = builder.simple(name, "avgpool", [src], kernel=k, stride=s)
            spatial = (spatial - k) // s + 1
        elif isinstance(mod, nn.AdaptiveAvgPool2d):
            out = mod.output_size if isinstance(mod.output_size, (tuple, list)) else (mod.output_size,) * 2
            if tuple(out) == (1, 1):
                src = builder.simple(name, "global_avg_pool", [src])
                spatial = 0
            elif tuple(out) == (spatial, spatial):
                builder.map.append((name, "(identity, omitted)"))
            else:
                raise ExportError(f"{name}: adaptive pool to {out} from {spatial} unsupported")
        elif isinstance(mod, nn.Flatten):
            src = builder.simple(name, "flatten", [src])
            spatial = 0
        elif isinstance(mod, nn.Dropout):
            builder.map.append((name, "(eval identity, omitted)"))
        elif isinstance(mod, nn.Linear):
            src = builder.linear(name, mod, src)
        else:
            raise ExportError(f"unsupported layer {name}: {type(mod).__name__}")
    return src, last_relu, spatial


def _finish(builder: _Builder, out: str, feature_end: str | None, input_shape,
            class_names) -> dict:
    if feature_end is None:
        raise ExportError("no 4-D relu found to serve as the feature-stage end layer")
    return {
        "format": FORMAT,
        "input_shape": list(input_shape),
        "class_names": list(class_names),
        "normalization": {"mean": list(IMAGENET_MEAN)[: input_shape[0]] if input_shape[0] == 3
                          else [0.0] * input_shape[0],
                          "std": list(IMAGENET_STD)[: input_shape[0]] if input_shape[0] == 3
                          else [1.0] * input_shape[0]},
        "feature_end": feature_end,
        "layers": builder.layers,
    }


def export_sequential(model: nn.Sequential, input_shape) -> tuple[dict, dict, _Builder]:
    """Plain feed-forward stacks (toy/custom nets)."""
    builder = _Builder()
    src, last_relu, _ = _walk_sequential(builder, enumerate(model), "input", "seq",
                                         spatial=input_shape[1])
    n_out = builder.layers[-1].get("out_features")
    if n_out is None:
        raise ExportError("custom export must end in a linear layer")
    doc = _finish(builder, src, last_relu, input_shape,
                  [f"class_{i}" for i in range(n_out)])
    return doc, builder.weights, builder


def export_vgg16(model) -> tuple[dict, dict, _Builder]:
    """VGG-16-class: features stack, (identity) adaptive pool, flat classifier."""
    builder = _Builder()
    src, last_relu, spatial = _walk_sequential(
        builder, ((f"features.{i}", m) for i, m in enumerate(model.features)),
        "input", "", spatial=224)
    n_convs = sum(1 for l in builder.layers if l["kind"] == "conv")
    if n_convs != 13:
        raise ExportError(f"expected 13 feature convolutions, found {n_convs}")
    src, _, spatial = _walk_sequential(builder, [("avgpool", model.avgpool)], src, "", spatial)
    src = builder.simple("flatten", "flatten", [src])
    src, _, _ = _walk_sequential(
        builder, ((f"classifier.{i}", m) for i, m in enumerate(model.classifier)),
        src, "", spatial=0)
    doc = _finish(builder, src, last_relu, (3, 224, 224),
                  [f"class_{i:04d}" for i in range(model.classifier[-1].out_features)])
    return doc, builder.weights, builder


def export_resnet50(model) -> tuple[dict, dict, _Builder]:
    """ResNet-50-class: stem, four bottleneck stages, pooled linear head."""
    builder = _Builder()
    src = builder.conv("conv1", model.conv1, "input")
    src = builder.batchnorm("bn1", model.bn1, src)
    src = builder.simple("relu", "relu", [src])
    mp = model.maxpool
    src = builder.simple("maxpool", "maxpool", [src], kernel=_pair(mp.kernel_size, "maxpool"),
                         stride=_pair(mp.stride, "maxpool"), padding=_pair(mp.padding, "maxpool"))
    for stage_idx in (1, 2, 3, 4):
        stage = getattr(model, f"layer{stage_idx}")
        for block_idx, block in enumerate(stage):
            p = f"layer{stage_idx}.{block_idx}"
            block_in = src
            t = builder.conv(f"{p}.conv1", block.conv1, block_in)
            t = builder.batchnorm(f"{p}.bn1", block.bn1, t)
            t = builder.simple(f"{p}.relu1", "relu", [t])
            t = builder.conv(f"{p}.conv2", block.conv2, t)
            t = builder.batchnorm(f"{p}.bn2", block.bn2, t)
            t = builder.simple(f"{p}.relu2", "relu", [t])
            t = builder.conv(f"{p}.conv3", block.conv3, t)
            t = builder.batchnorm(f"{p}.bn3", block.bn3, t)
            if block.downsample is not None:
                d = builder.conv(f"{p}.downsample.0", block.downsample[0], block_in)
                d = builder.batchnorm(f"{p}.downsample.1", block.downsample[1], d)
            else:
                d = block_in
            t = builder.simple(f"{p}.add", "residual_add", [t, d])
            src = builder.simple(f"{p}.relu3", "relu", [t])
    feature_end = src
    src = builder.simple("avgpool", "global_avg_pool", [src])
    builder.map.append(("flatten-after-avgpool", "(folded into global_avg_pool output)"))
    src = builder.linear("fc", model.fc, src)
    doc = _finish(builder, src, feature_end, (3, 224, 224),
                  [f"class_{i:04d}" for i in range(model.fc.out_features)])
    return doc, builder.weights, builder


# ---------------------------------------------------------------------------
# in-framework re-execution of a descriptor

def simulate_descriptor(doc: dict, weights: dict[str, np.ndarray], image: np.ndarray,
                        dtype=torch.float64, capture: bool = False):
    """Run the exported document with torch functional ops.

    ``image`` is (C,H,W) in [0,1].  Returns (logits, captured tensors); with
    ``capture`` the per-layer outputs keep requires_grad so callers can pull
    autograd vJps at every tensor the engine also reports.
    """
    mean = torch.tensor(doc["normalization"]["mean"], dtype=dtype)[:, None, None]
    std = torch.tensor(doc["normalization"]["std"], dtype=dtype)[:, None, None]
    x = (torch.as_tensor(image, dtype=dtype) - mean) / std
    x = x[None].requires_grad_(capture)
    vals: dict[str, torch.Tensor] = {"input": x}
    w = {k: torch.as_tensor(v, dtype=dtype) for k, v in weights.items()}
    consumed = set()
    for layer in doc["layers"]:
        kind = layer["kind"]
        ins = [vals[s] for s in layer["inputs"]]
        consumed.update(layer["inputs"])
        refs = layer.get("weights", {})
        if kind == "conv":
            y = F.conv2d(ins[0], w[refs["weight"]], w.get(refs.get("bias")),
                         stride=layer.get("stride", 1), padding=layer.get("padding", 0))
        elif kind == "linear":
            y = F.linear(ins[0], w[refs["weight"]], w.get(refs.get("bias")))
        elif kind == "relu":
            y = F.relu(ins[0])
        elif kind == "maxpool":
            y = F.max_pool2d(ins[0], layer["kernel"], layer["stride"], layer.get("padding", 0))
        elif kind == "avgpool":
            y = F.avg_pool2d(ins[0], layer["kernel"], layer["stride"])
        elif kind == "global_avg_pool":
            y = ins[0].mean(dim=(2, 3))
        elif kind == "flatten":
            y = ins[0].reshape(ins[0].shape[0], -1)
        elif kind == "residual_add":
            y = ins[0] + ins[1]
        elif kind == "batchnorm":
            y = F.batch_norm(ins[0], w[refs["mean"]], w[refs["var"]],
                             w[refs["gamma"]], w[refs["beta"]],
                             training=False, eps=layer.get("eps", 1e-5))
        else:
            raise ExportError(f"simulator: unknown kind '{kind}'")
        if capture:
            y.retain_grad()
        vals[layer["name"]] = y
    (output,) = [l["name"] for l in doc["layers"] if l["name"] not in consumed]
    return vals[output].reshape(-1), vals


def export_model(model: nn.Module, probe_images: list[np.ndarray], arch: str = "custom",
                 input_shape=None) -> tuple[str, bytes, ExportReport]:
    """Full export: descriptor JSON text, archive bytes, verification report.

    Probe logits are compared between the original module and the descriptor
    re-execution, both in float64, so any mapping slip shows up directly.
    """
    model = copy.deepcopy(model).double().eval()
    if arch == "vgg16":
        doc, weights, builder = export_vgg16(model)
    elif arch == "resnet50":
        doc, weights, builder = export_resnet50(model)
    elif arch == "custom":
        if input_shape is None:
            raise ExportError("custom export needs input_shape=(C,H,W)")
        doc, weights, builder = export_sequential(model, input_shape)
    else:
        raise ExportError(f"unknown architecture '{arch}'")
    if not probe_images:
        raise ExportError("at least one probe image is required")

    mean = torch.tensor(doc["normalization"]["mean"], dtype=torch.float64)[:, None, None]
    std = torch.tensor(doc["normalization"]["std"], dtype=torch.float64)[:, None, None]
    deviation = 0.0
    with torch.no_grad():
        for probe in probe_images:
            x = (torch.as_tensor(probe, dtype=torch.float64) - mean) / std
            reference = model(x[None]).reshape(-1)
            simulated, _ = simulate_descriptor(doc, weights, probe)
            deviation = max(deviation, float((reference - simulated).abs().max()))
    report = ExportReport(
        layer_map=builder.map,
        tensor_shapes=[(k, tuple(v.shape)) for k, v in weights.items()],
        max_abs_logit_deviation=deviation,
        n_probes=len(probe_images),
    )
    return json.dumps(doc, indent=2, sort_keys=True) + "\n", write_rspw(weights), report
