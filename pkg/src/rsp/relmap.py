"""Relative gradient activation maps at the feature-stage end layer.

Pipeline: per-class gradient activation maps G (spatially averaged gradients,
input-weighted, ReLU'd, max-normalized) -> relative map F contrasting the
target against its hostile classes -> channel-sign purging -> section
normalization onto a fixed 2:-1 positive/negative mass split.  The purged,
normalized map is the starting relevance for backward propagation; the
Grad-CAM heatmap falls out of the same averaged gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T

__all__ = ["ClassSpec", "SectionedRelevanceMap", "grad_activation_map",
           "relative_map", "contrastive_relative_map", "purge",
           "normalize_sections", "gradcam_heatmap", "gradient_saliency"]


@dataclass(frozen=True)
class ClassSpec:
    """Target class plus the hostile set whose evidence is driven negative."""

    target: int
    hostiles: tuple[int, ...] = ()
    mode: str = "predicted"  # "predicted" | "contrastive"

    def __post_init__(self):
        if self.target in self.hostiles:
            raise ValueError(f"target class {self.target} cannot be hostile to itself")
        if self.mode not in ("predicted", "contrastive"):
            raise ValueError(f"unknown class-spec mode '{self.mode}'")

    def validate(self, n_classes: int) -> None:
        for c in (self.target, *self.hostiles):
            if not (0 <= c < n_classes):
                raise ValueError(f"class index {c} out of range for {n_classes} classes")


@dataclass
class SectionedRelevanceMap:
    """Relevance values with disjoint positive/negative support masks."""

    values: np.ndarray
    mask_pos: np.ndarray
    mask_neg: np.ndarray

    def __post_init__(self):
        if np.logical_and(self.mask_pos, self.mask_neg).any():
            raise ValueError("positive and negative sections overlap")
        if (self.values > 0)[~self.mask_pos].any() or (self.values < 0)[~self.mask_neg].any():
            raise ValueError("relevance values outside their section masks")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "SectionedRelevanceMap":
        return cls(values=values, mask_pos=values > 0, mask_neg=values < 0)

    @property
    def positive(self) -> np.ndarray:
        return np.where(self.mask_pos, self.values, 0.0).astype(self.values.dtype)

    @property
    def negative(self) -> np.ndarray:
        return np.where(self.mask_neg, self.values, 0.0).astype(self.values.dtype)

    def total(self) -> float:
        return float(self.values.astype(np.float64).sum())


def _feature_grad(model: M.ModelDescriptor, weights, trace: M.ActivationTrace,
                  class_index: int) -> np.ndarray:
    """d logits[class] / d feature_end output, via one reverse sweep."""
    if model.feature_end not in trace.outputs:
        raise M.ModelError(f"feature_end '{model.feature_end}' missing from trace")
    cot = np.zeros(len(trace.logits), dtype=np.float64)
    cot[class_index] = 1.0
    grads = M.output_gradients(model, weights, trace, cot)
    return grads[model.feature_end]


def _avg_grad(model, weights, trace, class_index) -> np.ndarray:
    g = _feature_grad(model, weights, trace, class_index)
    return g.astype(np.float64).mean(axis=(2, 3), keepdims=True)  # (1,K,1,1)


def grad_activation_map(model, weights, trace, class_index: int) -> np.ndarray:
    """G = lambda * relu(x * spatial-mean gradient), max-normalized to 1.

    lambda falls back to 1 when the ReLU leaves nothing (identically zero map).
    """
    x = trace.outputs[model.feature_end].astype(np.float64)
    g = np.maximum(x * _avg_grad(model, weights, trace, class_index), 0.0)
    peak = g.max()
    if peak > 0:
        g = g / peak
    return g.astype(np.float32)


def _signed_activation_map(model, weights, trace, class_index: int) -> np.ndarray:
    # contrastive variant: no ReLU, normalized by the absolute peak
    x = trace.outputs[model.feature_end].astype(np.float64)
    g = x * _avg_grad(model, weights, trace, class_index)
    peak = np.abs(g).max()
    if peak > 0:
        g = g / peak
    return g.astype(np.float32)


def relative_map(model, weights, trace, spec: ClassSpec) -> np.ndarray:
    """F = n*G(target) - sum_q G(hostile_q); with no hostiles, F = G(target)."""
    if spec.mode != "predicted":
        raise ValueError("relative_map expects a 'predicted'-mode class spec")
    spec.validate(len(trace.logits))
    g_t = grad_activation_map(model, weights, trace, spec.target).astype(np.float64)
    if not spec.hostiles:
        return g_t.astype(np.float32)
    f = len(spec.hostiles) * g_t
    for h in spec.hostiles:
        f -= grad_activation_map(model, weights, trace, h).astype(np.float64)
    return f.astype(np.float32)


def contrastive_relative_map(model, weights, trace, target: int) -> np.ndarray:
    """All-classes-hostile variant on signed (un-ReLU'd) activation maps.

    F = (C-1)*Gs(target) - sum_{c != target} Gs(c).  This is a documented
    approximation of the contrastive initialization; it keeps the
    input-weighting and peak normalization but drops the ReLU so opposing
    evidence survives into F.
    """
    n_classes = len(trace.logits)
    if n_classes < 2:
        raise ValueError("contrastive map undefined for a single-class model")
    if not (0 <= target < n_classes):
        raise ValueError(f"class index {target} out of range for {n_classes} classes")
    f = (n_classes - 1) * _signed_activation_map(model, weights, trace, target).astype(np.float64)
    for c in range(n_classes):
        if c != target:
            f -= _signed_activation_map(model, weights, trace, c).astype(np.float64)
    return f.astype(np.float32)


def purge(f: np.ndarray) -> np.ndarray:
    """Zero every unit whose sign conflicts with its position's channel sum.

    Positions whose channel sum is exactly zero are zeroed wholesale (sign
    agreement with zero is undefined; dropping the column keeps the operation
    idempotent).
    """
    if f.ndim != 4:
        raise T.ShapeError(f"purge expects a 4-D map, got shape {f.shape}")
    s = f.astype(np.float64).sum(axis=1, keepdims=True)
    keep = ((f > 0) & (s > 0)) | ((f < 0) & (s < 0))
    return np.where(keep, f, 0.0).astype(f.dtype)


def normalize_sections(f: np.ndarray, total: float = 1.0) -> SectionedRelevanceMap:
    """Rescale the positive/negative sections to sums +2*total / -total.

    With no negative entries the positives are scaled to ``total`` alone; a
    map with no positive entries cannot seed propagation and is an error.
    """
    if total <= 0:
        raise ValueError(f"section total must be positive, got {total}")
    mask_pos = f > 0
    mask_neg = f < 0
    f64 = f.astype(np.float64)
    pos_sum = f64[mask_pos].sum()
    if pos_sum <= 0:
        raise ValueError("target class has no supporting evidence at feature_end")
    values = np.zeros_like(f64)
    if mask_neg.any():
        neg_sum = f64[mask_neg].sum()
        values[mask_pos] = f64[mask_pos] * (2.0 * total / pos_sum)
        values[mask_neg] = f64[mask_neg] * (total / -neg_sum)
    else:
        values[mask_pos] = f64[mask_pos] * (total / pos_sum)
    return SectionedRelevanceMap(values=values.astype(f.dtype),
                                 mask_pos=mask_pos, mask_neg=mask_neg)


def gradcam_heatmap(model, weights, trace, class_index: int) -> np.ndarray:
    """relu(sum_k x_k * avg_grad_k), bilinearly upsampled to input resolution."""
    x = trace.outputs[model.feature_end].astype(np.float64)
    cam = np.maximum((x * _avg_grad(model, weights, trace, class_index)).sum(axis=1), 0.0)[0]
    h, w = model.input_shape[1], model.input_shape[2]
    return T.bilinear_upsample(cam.astype(np.float32), h, w)


def gradient_saliency(model, weights, trace, class_index: int) -> np.ndarray:
    """Plain-gradient baseline: d logits[class] / d input, summed over channels."""
    cot = np.zeros(len(trace.logits), dtype=np.float64)
    cot[class_index] = 1.0
    g = M.output_gradients(model, weights, trace, cot)[M.INPUT]
    return g.astype(np.float64).sum(axis=(0, 1)).astype(np.float32)
