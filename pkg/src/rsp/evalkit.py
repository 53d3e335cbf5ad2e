"""Evaluation protocols and heatmap rendering.

Pointing Game (argmax-in-box with tolerance), IoU between positive
attributions and bounding boxes (raw and mean-thresholded), cascading weight
randomization curves, and deterministic seismic-colormap PNG output.

Annotations come in as JSON lines, one object per image:

    {"id": "img1", "width": 64, "height": 64,
     "boxes": [{"class": 0, "x0": 3, "y0": 3, "x1": 8, "y1": 8}],
     "labels": [0, 1]}

Box coordinates are inclusive pixel indices.  Result rows go out as CSV with
header  id,class,mode,hit,iou_raw,iou_thr,argmax_x,argmax_y .
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import model as M
from . import propagate as P

__all__ = ["BBoxAnnotation", "EvalRecord", "load_annotations", "records_to_csv",
           "pointing_game", "argmax_point", "positive_mask", "miou_bbox",
           "spearman", "sanity_curve", "render_heatmap"]

CSV_HEADER = "id,class,mode,hit,iou_raw,iou_thr,argmax_x,argmax_y"


@dataclass
class BBoxAnnotation:
    """Ground-truth boxes for one image, grouped by class index."""

    image_id: str
    width: int
    height: int
    boxes: dict[int, list[tuple[int, int, int, int]]] = field(default_factory=dict)
    labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        for cls, boxes in self.boxes.items():
            for (x0, y0, x1, y1) in boxes:
                if not (0 <= x0 <= x1 < self.width and 0 <= y0 <= y1 < self.height):
                    raise ValueError(
                        f"annotation '{self.image_id}' class {cls}: "
                        f"box ({x0},{y0},{x1},{y1}) outside {self.width}x{self.height}")


def load_annotations(path) -> dict[str, BBoxAnnotation]:
    """Parse a JSON-lines annotation file into a map keyed by image id."""
    out: dict[str, BBoxAnnotation] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: not valid JSON: {e}") from None
            boxes: dict[int, list] = {}
            for b in doc.get("boxes", []):
                boxes.setdefault(int(b["class"]), []).append(
                    (int(b["x0"]), int(b["y0"]), int(b["x1"]), int(b["y1"])))
            ann = BBoxAnnotation(image_id=str(doc["id"]), width=int(doc["width"]),
                                 height=int(doc["height"]), boxes=boxes,
                                 labels=[int(c) for c in doc.get("labels", [])])
            if ann.image_id in out:
                raise ValueError(f"{path}:{line_no}: duplicate image id '{ann.image_id}'")
            out[ann.image_id] = ann
    return out


def annotation_to_json(ann: BBoxAnnotation) -> str:
    doc = {
        "id": ann.image_id, "width": ann.width, "height": ann.height,
        "boxes": [{"class": cls, "x0": b[0], "y0": b[1], "x1": b[2], "y1": b[3]}
                  for cls in sorted(ann.boxes) for b in ann.boxes[cls]],
        "labels": list(ann.labels),
    }
    return json.dumps(doc, sort_keys=True)


@dataclass
class EvalRecord:
    """One (image, class) evaluation outcome."""

    image_id: str
    class_index: int
    mode: str                  # "P" or "L"
    hit: bool
    iou_raw: float
    iou_thresholded: float
    argmax_x: int
    argmax_y: int

    def csv_row(self) -> str:
        return (f"{self.image_id},{self.class_index},{self.mode},{int(self.hit)},"
                f"{self.iou_raw:.6f},{self.iou_thresholded:.6f},{self.argmax_x},{self.argmax_y}")


def records_to_csv(records) -> str:
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in records]) + "\n"


def argmax_point(pixel_map: np.ndarray) -> tuple[int, int]:
    """(x, y) of the map's global maximum; ties go to the first entry in
    row-major order."""
    y, x = np.unravel_index(int(np.argmax(pixel_map)), pixel_map.shape)
    return int(x), int(y)


def pointing_game(pixel_map: np.ndarray, annotation: BBoxAnnotation, class_index: int,
                  tolerance_px: int = 15) -> bool:
    """Hit iff the argmax lies inside any class box dilated by tolerance_px
    on all sides (closed: exactly on the dilated edge still counts)."""
    if class_index not in annotation.boxes:
        raise ValueError(f"class {class_index} has no boxes in annotation "
                         f"'{annotation.image_id}'")
    px, py = argmax_point(pixel_map)
    for (x0, y0, x1, y1) in annotation.boxes[class_index]:
        if (x0 - tolerance_px <= px <= x1 + tolerance_px
                and y0 - tolerance_px <= py <= y1 + tolerance_px):
            return True
    return False


def positive_mask(pixel_map: np.ndarray, thresholded: bool) -> np.ndarray:
    """Support of the positive attributions; with thresholding, only values
    above the mean of the strictly-positive ones.  All-nonpositive maps give
    an empty mask."""
    positive = pixel_map > 0
    if not thresholded:
        return positive
    if not positive.any():
        return positive
    thr = pixel_map[positive].astype(np.float64).mean()
    return pixel_map > thr


def _rasterize(annotation: BBoxAnnotation, class_index: int) -> np.ndarray:
    mask = np.zeros((annotation.height, annotation.width), dtype=bool)
    for (x0, y0, x1, y1) in annotation.boxes.get(class_index, []):
        mask[y0 : y1 + 1, x0 : x1 + 1] = True
    return mask


def miou_bbox(mask: np.ndarray, annotation: BBoxAnnotation, class_index: int) -> float:
    """IoU between a boolean mask and the union of the class's boxes."""
    if class_index not in annotation.boxes:
        raise ValueError(f"class {class_index} has no boxes in annotation "
                         f"'{annotation.image_id}'")
    boxes = _rasterize(annotation, class_index)
    if mask.shape != boxes.shape:
        raise ValueError(f"mask shape {mask.shape} != image {boxes.shape}")
    union = np.logical_or(mask, boxes).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(mask, boxes).sum() / union)


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation of two flattened maps; 0.0 when either side
    is constant (undefined ranks).

    Tie-free inputs use the exact rank-difference formula so that identical
    (reversed) rankings come out as exactly +1.0 (-1.0); ties fall back to
    the Pearson-of-ranks estimate.
    """
    af = np.asarray(a, dtype=np.float64).ravel()
    bf = np.asarray(b, dtype=np.float64).ravel()
    if np.all(af == af[0]) or np.all(bf == bf[0]):
        return 0.0
    n = af.size
    ra = stats.rankdata(af)
    rb = stats.rankdata(bf)
    if np.unique(af).size == n and np.unique(bf).size == n:
        d2 = float(((ra - rb) ** 2).sum())
        return 1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    rho = stats.spearmanr(af, bf).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def default_layer_order(model: M.ModelDescriptor) -> list[str]:
    """Learnable layers from the output end back to the first layer."""
    return [l.name for l in reversed(model.layers) if l.kind in ("conv", "linear")]


def sanity_curve(model: M.ModelDescriptor, weights, image, spec, config=None,
                 layer_order=None, seed: int = 0):
    """Cascading-randomization sensitivity curve.

    Stage 0 is the untouched model (rho == 1 by construction); stage k
    re-initializes everything from the output back through layer_order[k-1]
    and reports the Spearman correlation of the new pixel map against the
    original.  A randomized model that no longer produces positive evidence
    for the class yields a degenerate (empty) map; that stage records rho 0.
    """
    if any(l.kind == "batchnorm" for l in model.layers):
        model, weights = M.fold_batchnorm(model, weights)
    if layer_order is None:
        layer_order = default_layer_order(model)
    base = P.run_rsp(model, weights, image, spec, config)
    curve = [("none", 1.0, base.pixel_map)]
    for name in layer_order:
        rand = M.randomize_cascading(model, weights, from_layer=name, seed=seed)
        try:
            res = P.run_rsp(model, rand, image, spec, config)
            rho = spearman(base.pixel_map, res.pixel_map)
            stage_map = res.pixel_map
        except (ValueError, P.PropagationError):
            rho = 0.0
            stage_map = np.zeros_like(base.pixel_map)
        curve.append((name, rho, stage_map))
    return curve


# ---------------------------------------------------------------------------
# rendering

def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    chunk = tag + payload
    return struct.pack(">I", len(payload)) + chunk + struct.pack(">I", zlib.crc32(chunk))


def _write_png(rgb: np.ndarray) -> bytes:
    """Minimal RGB8 PNG encoder (filter 0 rows, fixed-level zlib stream)."""
    h, w, _ = rgb.shape
    raw = io.BytesIO()
    for row in rgb:
        raw.write(b"\x00")
        raw.write(row.astype(np.uint8).tobytes())
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"".join([
        b"\x89PNG\r\n\x1a\n",
        _png_chunk(b"IHDR", header),
        _png_chunk(b"IDAT", zlib.compress(raw.getvalue(), 6)),
        _png_chunk(b"IEND", b""),
    ])


def seismic_rgb(pixel_map: np.ndarray) -> np.ndarray:
    """Blue-white-red coloring, white at zero, symmetric in max|value|."""
    v = pixel_map.astype(np.float64)
    peak = np.abs(v).max()
    v = v / peak if peak > 0 else np.zeros_like(v)
    rgb = np.empty((*v.shape, 3), dtype=np.float64)
    up = np.clip(v, 0.0, 1.0)
    down = np.clip(-v, 0.0, 1.0)
    rgb[..., 0] = 1.0 - down          # red channel fades toward blue side
    rgb[..., 1] = 1.0 - np.abs(v)     # green vanishes at both extremes
    rgb[..., 2] = 1.0 - up            # blue channel fades toward red side
    return np.round(rgb * 255.0).astype(np.uint8)


def render_heatmap(pixel_map: np.ndarray, underlay: np.ndarray | None = None) -> bytes:
    """Render a relevance map to PNG bytes; deterministic for fixed inputs.

    ``underlay`` is an optional (C,H,W) or (H,W) image in [0,1] blended at
    0.5 alpha under the colors.
    """
    rgb = seismic_rgb(pixel_map).astype(np.float64)
    if underlay is not None:
        u = np.asarray(underlay, dtype=np.float64)
        if u.ndim == 2:
            u = u[None, ...]
        if u.shape[0] == 1:
            u = np.repeat(u, 3, axis=0)
        if u.shape[0] != 3 or u.shape[1:] != pixel_map.shape:
            raise ValueError(f"underlay shape {np.asarray(underlay).shape} does not match "
                             f"map {pixel_map.shape}")
        under = np.clip(u, 0.0, 1.0).transpose(1, 2, 0) * 255.0
        rgb = 0.5 * rgb + 0.5 * under
    return _write_png(np.round(rgb).astype(np.uint8))
