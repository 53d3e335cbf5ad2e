"""Built-in toy networks and synthetic data.

These cover everything the test and acceptance suites need without any
exported real-world model: a trivial identity net, a constructed
"two-quadrant" localization protocol whose class evidence regions are
disjoint by design, a deeper net for randomization-sensitivity runs, and a
generator of random mixed-topology nets for conservation audits.
"""

from __future__ import annotations

import numpy as np

from .evalkit import BBoxAnnotation
from .model import LayerSpec, ModelDescriptor

__all__ = ["identity_net", "two_quadrant_model", "two_quadrant_sample",
           "two_quadrant_suite", "sanity_toy_net", "random_toy_net",
           "TARGET_QUADRANT", "HOSTILE_QUADRANT"]

# Quadrants of the 32x32 two-quadrant images (row slice, column slice).
TARGET_QUADRANT = (slice(0, 16), slice(0, 16))
HOSTILE_QUADRANT = (slice(16, 32), slice(16, 32))

M_INPUT = "input"
_SIZE = 32
_BLOB = 5


def _unit_norm(c: int):
    return (np.zeros(c, dtype=np.float32), np.ones(c, dtype=np.float32))


def identity_net(channels: int = 2, size: int = 4):
    """1x1 conv with identity weights straight into a global average pool:
    logits equal the per-channel spatial means of the input."""
    layers = [
        LayerSpec("conv1", "conv", (M_INPUT,), {"weight": "conv1.weight"},
                  out_channels=channels, kernel=(1, 1)),
        LayerSpec("gap", "global_avg_pool", ("conv1",)),
    ]
    model = ModelDescriptor(layers=layers, input_shape=(channels, size, size),
                            class_names=[f"class_{i}" for i in range(channels)],
                            normalization=_unit_norm(channels), feature_end="conv1")
    w = np.zeros((channels, channels, 1, 1), dtype=np.float32)
    for i in range(channels):
        w[i, i, 0, 0] = 1.0
    return model, {"conv1.weight": w}


def two_quadrant_model():
    """Two-class detector with spatially disjoint evidence channels.

    Input channel 0 carries class-A evidence, channel 1 class-B evidence.
    conv1 averages each channel under a negative bias (background noise dies
    at the relu), conv2 is a 1x1 identity so propagation crosses a weighted
    hidden layer, and a diagonal classifier reads the pooled activations.
    """
    layers = [
        LayerSpec("conv1", "conv", (M_INPUT,),
                  {"weight": "conv1.weight", "bias": "conv1.bias"},
                  out_channels=2, kernel=(3, 3), stride=1, padding=1),
        LayerSpec("relu1", "relu", ("conv1",)),
        LayerSpec("conv2", "conv", ("relu1",), {"weight": "conv2.weight"},
                  out_channels=2, kernel=(1, 1)),
        LayerSpec("relu2", "relu", ("conv2",)),
        LayerSpec("gap", "global_avg_pool", ("relu2",)),
        LayerSpec("fc", "linear", ("gap",), {"weight": "fc.weight", "bias": "fc.bias"},
                  out_features=2),
    ]
    model = ModelDescriptor(layers=layers, input_shape=(2, _SIZE, _SIZE),
                            class_names=["blockA", "blockB"],
                            normalization=_unit_norm(2), feature_end="relu2")
    w1 = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w1[0, 0] = 1.0 / 9.0
    w1[1, 1] = 1.0 / 9.0
    w2 = np.zeros((2, 2, 1, 1), dtype=np.float32)
    w2[0, 0, 0, 0] = 1.0
    w2[1, 1, 0, 0] = 1.0
    weights = {
        "conv1.weight": w1,
        "conv1.bias": np.full(2, -0.15, dtype=np.float32),
        "conv2.weight": w2,
        "fc.weight": np.diag([200.0, 200.0]).astype(np.float32),
        "fc.bias": np.full(2, -1.0, dtype=np.float32),
    }
    return model, weights


def two_quadrant_sample(rng: np.random.Generator, image_id: str):
    """One noisy image with a class-A blob in the top-left quadrant and a
    class-B blob in the bottom-right, plus its box annotation."""
    img = rng.uniform(0.0, 0.2, size=(2, _SIZE, _SIZE)).astype(np.float32)
    boxes = {}
    for cls, (lo, hi) in enumerate(((1, 16 - _BLOB - 1), (17, _SIZE - _BLOB - 1))):
        r = int(rng.integers(lo, hi + 1))
        c = int(rng.integers(lo, hi + 1))
        amp = float(rng.uniform(0.7, 1.0))
        img[cls, r : r + _BLOB, c : c + _BLOB] += amp
        boxes[cls] = [(c, r, c + _BLOB - 1, r + _BLOB - 1)]
    np.clip(img, 0.0, 1.0, out=img)
    ann = BBoxAnnotation(image_id=image_id, width=_SIZE, height=_SIZE,
                         boxes=boxes, labels=[0, 1])
    return img, ann


def two_quadrant_suite(n_images: int, seed: int = 0):
    """Model, weights and ``n_images`` generated (id, image, annotation) rows."""
    model, weights = two_quadrant_model()
    rng = np.random.default_rng(seed)
    samples = [(f"tq{i:04d}", *two_quadrant_sample(rng, f"tq{i:04d}"))
               for i in range(n_images)]
    return model, weights, samples


def _rand_conv_weight(rng, k_out, k_in, kh, kw):
    fan_in = k_in * kh * kw
    return (rng.standard_normal((k_out, k_in, kh, kw)) / np.sqrt(fan_in)).astype(np.float32)


def sanity_toy_net(seed: int = 0):
    """Three conv stages plus a small classifier; structured input image.

    Deep enough for a meaningful cascading-randomization curve.
    """
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec("conv1", "conv", (M_INPUT,), {"weight": "conv1.weight"},
                  out_channels=4, kernel=(3, 3), padding=1),
        LayerSpec("relu1", "relu", ("conv1",)),
        LayerSpec("conv2", "conv", ("relu1",), {"weight": "conv2.weight"},
                  out_channels=6, kernel=(3, 3), padding=1),
        LayerSpec("relu2", "relu", ("conv2",)),
        LayerSpec("pool2", "maxpool", ("relu2",), kernel=2, stride=2),
        LayerSpec("conv3", "conv", ("pool2",), {"weight": "conv3.weight"},
                  out_channels=6, kernel=(3, 3), padding=1),
        LayerSpec("relu3", "relu", ("conv3",)),
        LayerSpec("gap", "global_avg_pool", ("relu3",)),
        LayerSpec("fc", "linear", ("gap",), {"weight": "fc.weight", "bias": "fc.bias"},
                  out_features=3),
    ]
    model = ModelDescriptor(layers=layers, input_shape=(2, 16, 16),
                            class_names=["c0", "c1", "c2"],
                            normalization=_unit_norm(2), feature_end="relu3")
    weights = {
        "conv1.weight": np.abs(_rand_conv_weight(rng, 4, 2, 3, 3)),
        "conv2.weight": _rand_conv_weight(rng, 6, 4, 3, 3),
        "conv3.weight": _rand_conv_weight(rng, 6, 6, 3, 3),
        "fc.weight": (rng.standard_normal((3, 6)) / np.sqrt(6)).astype(np.float32),
        "fc.bias": np.zeros(3, dtype=np.float32),
    }
    img = rng.uniform(0.05, 0.3, size=(2, 16, 16)).astype(np.float32)
    img[0, 2:7, 2:7] += 0.6
    img[1, 9:14, 9:14] += 0.6
    np.clip(img, 0.0, 1.0, out=img)
    return model, weights, img


def random_toy_net(seed: int):
    """Random small net mixing conv / relu / maxpool / avgpool / residual
    feature blocks with a linear classifier, plus a matching random image.

    Feature convs carry no bias: relevance on a bias-born activation whose
    receptive field is dead cannot reach the input, which would show up as a
    (real) conservation leak.  Classifier biases are random; the classifier
    is only differentiated through, never propagated through.
    """
    rng = np.random.default_rng(seed)
    c_in = int(rng.integers(1, 4))
    size = int(rng.integers(8, 13))
    n_classes = int(rng.integers(3, 5))

    layers: list[LayerSpec] = []
    weights: dict[str, np.ndarray] = {}
    prev, channels, extent = M_INPUT, c_in, size
    last_relu = None
    n_blocks = int(rng.integers(1, 4))
    for b in range(n_blocks):
        kind = rng.choice(["conv", "conv_pool", "residual", "conv_avg"])
        cname = f"conv{b}"
        if kind == "residual":
            a, m = f"{cname}a", f"{cname}m"
            layers += [
                LayerSpec(a, "conv", (prev,), {"weight": f"{a}.weight"},
                          out_channels=channels, kernel=(3, 3), padding=1),
                LayerSpec(f"relu{b}m", "relu", (a,)),
                LayerSpec(m, "conv", (f"relu{b}m",), {"weight": f"{m}.weight"},
                          out_channels=channels, kernel=(3, 3), padding=1),
                LayerSpec(f"add{b}", "residual_add", (m, prev)),
                LayerSpec(f"relu{b}", "relu", (f"add{b}",)),
            ]
            weights[f"{a}.weight"] = _rand_conv_weight(rng, channels, channels, 3, 3)
            weights[f"{m}.weight"] = _rand_conv_weight(rng, channels, channels, 3, 3)
            prev = last_relu = f"relu{b}"
            continue
        c_out = int(rng.integers(2, 6))
        layers.append(LayerSpec(cname, "conv", (prev,), {"weight": f"{cname}.weight"},
                                out_channels=c_out, kernel=(3, 3), padding=1))
        layers.append(LayerSpec(f"relu{b}", "relu", (cname,)))
        weights[f"{cname}.weight"] = _rand_conv_weight(rng, c_out, channels, 3, 3)
        channels, prev = c_out, f"relu{b}"
        last_relu = prev
        if kind in ("conv_pool", "conv_avg") and extent >= 4:
            pool_kind = "maxpool" if kind == "conv_pool" else "avgpool"
            layers.append(LayerSpec(f"pool{b}", pool_kind, (prev,), kernel=2, stride=2))
            prev = f"pool{b}"
            extent //= 2

    # feature_end must be a relu; a trailing pool then counts as classifier-side
    feature_end = last_relu
    assert feature_end is not None
    layers.append(LayerSpec("gap", "global_avg_pool", (prev,)))
    layers.append(LayerSpec("fc", "linear", ("gap",),
                            {"weight": "fc.weight", "bias": "fc.bias"},
                            out_features=n_classes))
    weights["fc.weight"] = (rng.standard_normal((n_classes, channels))
                            / np.sqrt(channels)).astype(np.float32)
    weights["fc.bias"] = (0.1 * rng.standard_normal(n_classes)).astype(np.float32)
    model = ModelDescriptor(layers=layers, input_shape=(c_in, size, size),
                            class_names=[f"class_{i}" for i in range(n_classes)],
                            normalization=_unit_norm(c_in), feature_end=feature_end)
    image = rng.uniform(0.1, 1.0, size=(c_in, size, size)).astype(np.float32)
    return model, weights, image
