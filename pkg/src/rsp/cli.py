"""Command-line front end.

Subcommands:
  attribute  heatmap PNG (+ conservation-audit JSON) per image and class
  evaluate   pointing game / box-IoU over an annotated image set, CSV + summary
  sanity     cascading-randomization curve CSV + per-stage heatmaps
  inspect    dump logits as JSON and optionally per-layer gradients as .rspw

Exit codes: 0 success, 1 outputs produced but a conservation audit failed,
2 input/parse error.  RSP_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit as E
from . import model as M
from . import propagate as P
from . import relmap as RM
from . import weights_io as W
from .relmap import ClassSpec

log = logging.getLogger("rsp")

MODES = ("rsp", "c-rsp", "gradcam", "gradient")


@dataclass
class RunManifest:
    """Everything one command invocation needs, resolved and validated."""

    model: M.ModelDescriptor
    weights: dict
    images: list[tuple[str, Path]]        # (image id, path)
    mode: str = "rsp"
    policy: tuple[str, float] = ("multilabel", 0.5)
    target: str | None = None
    config: P.PropagationConfig = field(default_factory=P.PropagationConfig)
    tolerance_px: int = 15
    threshold: str = "mean"               # headline IoU variant: "none" | "mean"
    workers: int = 1
    seed: int = 0
    out_dir: Path = Path(".")


def parse_policy(text: str) -> tuple[str, float]:
    if text == "top1":
        return ("top1", 0.0)
    if text.startswith("multilabel"):
        _, _, theta = text.partition(":")
        return ("multilabel", float(theta) if theta else 0.5)
    raise ValueError(f"unknown prediction policy '{text}' (use top1 or multilabel[:theta])")


def predict_classes(logits: np.ndarray, policy: tuple[str, float]) -> set[int]:
    """Class selection for "P"-style evaluation: sigmoid threshold or top-1."""
    kind, theta = policy
    if kind == "top1":
        return {int(np.argmax(logits))}
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    return {int(i) for i in np.nonzero(scores > theta)[0]}


def load_image(path: Path, model: M.ModelDescriptor) -> np.ndarray:
    """Load a (C,H,W) float image in [0,1]; .npy arrays as-is, anything else
    through Pillow with bilinear resizing to the model resolution."""
    c, h, w = model.input_shape
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        if img.shape != (c, h, w):
            raise ValueError(f"{path}: array shape {img.shape} != model input {(c, h, w)}")
        return img
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if c == 1 else "RGB")
        if im.size != (w, h):
            im = im.resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = arr[None, ...] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    if arr.shape[0] != c:
        raise ValueError(f"{path}: {arr.shape[0]} channels, model wants {c}")
    return arr


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _safe_name(name: str) -> str:
    return "".join(ch if (ch.isalnum() or ch in "-_.") else "_" for ch in name)


def _class_index(model: M.ModelDescriptor, name: str) -> int:
    try:
        return model.class_names.index(name)
    except ValueError:
        raise ValueError(f"unknown class name '{name}'; model has {model.class_names}") from None


def _attribution(manifest: RunManifest, trace, target: int, predicted: set[int]):
    """One (image, class) attribution: (pixel map, audit rows or None)."""
    model, weights = manifest.model, manifest.weights
    if manifest.mode == "rsp":
        spec = ClassSpec(target=target, hostiles=tuple(sorted(predicted - {target})))
        res = P.run_rsp(model, weights, None, spec, manifest.config, trace=trace)
        return res.pixel_map, res.audit
    if manifest.mode == "c-rsp":
        spec = ClassSpec(target=target, mode="contrastive")
        res = P.run_rsp(model, weights, None, spec, manifest.config, trace=trace)
        return res.pixel_map, res.audit
    if manifest.mode == "gradcam":
        return RM.gradcam_heatmap(model, weights, trace, target), None
    if manifest.mode == "gradient":
        return RM.gradient_saliency(model, weights, trace, target), None
    raise ValueError(f"unknown mode '{manifest.mode}'")


def _audit_doc(image_id, class_name, manifest, trace, audit):
    return {
        "image": image_id,
        "class": class_name,
        "mode": manifest.mode,
        "logits": [float(v) for v in trace.logits],
        "initial_sum": 1.0,
        "tolerance": manifest.config.conservation_tolerance,
        "passed": all(r.ok for r in audit),
        "layers": [{"layer": r.layer, "sum": r.layer_sum, "frontier": r.frontier_sum,
                    "ok": r.ok} for r in audit],
    }


def cmd_attribute(manifest: RunManifest) -> int:
    """Write <id>_<class>_<mode>.png (plus audit JSON for conserving modes)."""
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0

    def one(item):
        image_id, path = item
        image = load_image(path, manifest.model)
        trace = M.forward_trace(manifest.model, manifest.weights, image)
        predicted = predict_classes(trace.logits, manifest.policy)
        if manifest.target is not None:
            targets = [_class_index(manifest.model, manifest.target)]
        else:
            targets = sorted(predicted)
        outputs = []
        for t in targets:
            pixel_map, audit = _attribution(manifest, trace, t, predicted)
            cname = _safe_name(manifest.model.class_names[t])
            png = E.render_heatmap(pixel_map, underlay=image if image.shape[0] in (1, 3) else None)
            outputs.append((f"{image_id}_{cname}_{manifest.mode}.png", png, None))
            if audit is not None:
                doc = _audit_doc(image_id, manifest.model.class_names[t], manifest, trace, audit)
                bad = [r.layer for r in audit if not r.ok]
                outputs.append((f"{image_id}_{cname}_{manifest.mode}.audit.json",
                                (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode(),
                                bad))
        return outputs

    for outputs in _map_ordered(one, manifest.images, manifest.workers):
        for fname, data, bad_layers in outputs:
            atomic_write(manifest.out_dir / fname, data)
            log.info("wrote %s", fname)
            if bad_layers:
                failures += 1
                print(f"rsp: conservation audit failed at layer(s) "
                      f"{', '.join(bad_layers)} ({fname})", file=sys.stderr)
    return 1 if failures else 0


def cmd_evaluate(manifest: RunManifest, annotations: dict[str, E.BBoxAnnotation],
                 eval_mode: str = "P") -> int:
    """Pointing game + box IoU over the manifest's images; writes results.csv
    and a plain-text summary, printing the headline numbers."""
    if eval_mode not in ("P", "L"):
        raise ValueError(f"eval mode must be P or L, got '{eval_mode}'")
    missing = sorted(i for i, _ in manifest.images if i not in annotations)
    if missing:
        raise ValueError(f"images without annotations: {missing}")
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    audit_failures = 0
    skipped_images = 0
    records: list[E.EvalRecord] = []

    def one(item):
        image_id, path = item
        ann = annotations[image_id]
        image = load_image(path, manifest.model)
        trace = M.forward_trace(manifest.model, manifest.weights, image)
        predicted = predict_classes(trace.logits, manifest.policy)
        classes = sorted(predicted if eval_mode == "P" else set(ann.labels))
        classes = [c for c in classes if c in ann.boxes]
        rows = []
        bad_audits = 0
        for cls in classes:
            pixel_map, audit = _attribution(manifest, trace, cls, predicted)
            if audit is not None and not all(r.ok for r in audit):
                bad_audits += 1
            px, py = E.argmax_point(pixel_map)
            rows.append(E.EvalRecord(
                image_id=image_id, class_index=cls, mode=eval_mode,
                hit=E.pointing_game(pixel_map, ann, cls, manifest.tolerance_px),
                iou_raw=E.miou_bbox(E.positive_mask(pixel_map, False), ann, cls),
                iou_thresholded=E.miou_bbox(E.positive_mask(pixel_map, True), ann, cls),
                argmax_x=px, argmax_y=py))
        return rows, bad_audits

    for rows, bad_audits in _map_ordered(one, manifest.images, manifest.workers):
        audit_failures += bad_audits
        if not rows:
            skipped_images += 1
        records.extend(rows)

    atomic_write(manifest.out_dir / "results.csv", E.records_to_csv(records).encode())
    n = len(records)
    pg = sum(r.hit for r in records) / n if n else 0.0
    iou_raw = sum(r.iou_raw for r in records) / n if n else 0.0
    iou_thr = sum(r.iou_thresholded for r in records) / n if n else 0.0
    headline = iou_thr if manifest.threshold == "mean" else iou_raw
    summary = "\n".join([
        f"mode: {manifest.mode}  selection: {eval_mode}",
        f"records: {n}  images_skipped: {skipped_images}",
        f"pointing_game_accuracy: {pg:.4f}",
        f"mean_iou_raw: {iou_raw:.4f}",
        f"mean_iou_thresholded: {iou_thr:.4f}",
        f"headline_iou (threshold={manifest.threshold}): {headline:.4f}",
    ]) + "\n"
    atomic_write(manifest.out_dir / "summary.txt", summary.encode())
    sys.stdout.write(summary)
    return 1 if audit_failures else 0


def cmd_sanity(manifest: RunManifest) -> int:
    """Randomization-sensitivity curve for the first image of the manifest."""
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    image_id, path = manifest.images[0]
    image = load_image(path, manifest.model)
    trace = M.forward_trace(manifest.model, manifest.weights, image)
    predicted = predict_classes(trace.logits, manifest.policy)
    if manifest.target is not None:
        target = _class_index(manifest.model, manifest.target)
    else:
        target = int(np.argmax(trace.logits))
    mode = "contrastive" if manifest.mode == "c-rsp" else "predicted"
    hostiles = tuple(sorted(predicted - {target})) if mode == "predicted" else ()
    spec = ClassSpec(target=target, hostiles=hostiles, mode=mode)
    curve = E.sanity_curve(manifest.model, manifest.weights, image, spec,
                           manifest.config, seed=manifest.seed)
    lines = ["stage,layer,spearman"]
    for k, (layer, rho, stage_map) in enumerate(curve):
        lines.append(f"{k},{layer},{rho:.6f}")
        png = E.render_heatmap(stage_map, underlay=image if image.shape[0] in (1, 3) else None)
        atomic_write(manifest.out_dir / f"{image_id}_sanity_{k:02d}_{_safe_name(layer)}.png", png)
    atomic_write(manifest.out_dir / "sanity_curve.csv", ("\n".join(lines) + "\n").encode())
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_inspect(manifest: RunManifest, dump_grads: Path | None = None) -> int:
    """Dump logits (JSON to stdout and inspect.json) and, optionally, the
    gradients of the target logit at every layer output as a .rspw archive."""
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    image_id, path = manifest.images[0]
    image = load_image(path, manifest.model)
    trace = M.forward_trace(manifest.model, manifest.weights, image)
    predicted = predict_classes(trace.logits, manifest.policy)
    doc = {
        "image": image_id,
        "logits": [float(v) for v in trace.logits],
        "class_names": list(manifest.model.class_names),
        "predicted": sorted(predicted),
    }
    if dump_grads is not None:
        target = (_class_index(manifest.model, manifest.target)
                  if manifest.target is not None else int(np.argmax(trace.logits)))
        cot = np.zeros(len(trace.logits))
        cot[target] = 1.0
        grads = M.output_gradients(manifest.model, manifest.weights, trace, cot)
        archive = {f"grad/{name}": g.astype(np.float32) for name, g in sorted(grads.items())}
        atomic_write(dump_grads, W.write_archive(archive))
        doc["gradients"] = str(dump_grads)
        doc["gradient_class"] = target
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    atomic_write(manifest.out_dir / "inspect.json", payload.encode())
    sys.stdout.write(payload)
    return 0


def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, items)


# ---------------------------------------------------------------------------
# argument plumbing

def _collect_images(args) -> list[tuple[str, Path]]:
    images: list[tuple[str, Path]] = []
    for p in args.image or []:
        path = Path(p)
        images.append((path.stem, path))
    if args.image_dir:
        root = Path(args.image_dir)
        for path in sorted(root.iterdir()):
            if path.suffix.lower() in (".npy", ".png", ".jpg", ".jpeg"):
                images.append((path.stem, path))
    if not images:
        raise ValueError("no input images (use --image or --image-dir)")
    return images


def _build_manifest(args) -> RunManifest:
    model = M.load_descriptor(args.model)
    weights = W.read_archive_file(args.weights)
    report = W.validate_against_descriptor(weights, model)
    if not report.ok():
        raise ValueError("weights do not match the model descriptor:\n  "
                         + "\n  ".join(report.lines()))
    if any(l.kind == "batchnorm" for l in model.layers):
        model, weights = M.fold_batchnorm(model, weights)
        log.info("folded batchnorm layers into their convolutions")
    config = P.PropagationConfig(per_layer_purge=(args.per_layer_purge == "on"))
    return RunManifest(
        model=model, weights=weights, images=_collect_images(args),
        mode=args.mode, policy=parse_policy(args.policy), target=args.target,
        config=config, tolerance_px=args.tolerance_px, threshold=args.threshold,
        workers=args.workers, seed=args.seed, out_dir=Path(args.out),
    )


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--model", required=True, help="model descriptor JSON")
    sub.add_argument("--weights", required=True, help=".rspw weight archive")
    sub.add_argument("--image", action="append", help="input image (.npy/.png/.jpg); repeatable")
    sub.add_argument("--image-dir", help="directory of input images")
    sub.add_argument("--mode", choices=MODES, default="rsp",
                     help="attribution mode (c-rsp contrasts against all other classes; "
                          "its map formula is an approximation)")
    sub.add_argument("--policy", default="multilabel:0.5",
                     help="prediction policy: multilabel[:theta] or top1")
    sub.add_argument("--target", help="class name to attribute (default: predicted classes)")
    sub.add_argument("--per-layer-purge", choices=("on", "off"), default="on")
    sub.add_argument("--tolerance-px", type=int, default=15, help="pointing-game box dilation")
    sub.add_argument("--threshold", choices=("none", "mean"), default="mean",
                     help="headline IoU variant for evaluate summaries")
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", default="out", help="output directory")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RSP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="rsp", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("attribute", "evaluate", "sanity", "inspect"):
        sub = subs.add_parser(name)
        _add_common(sub)
        if name == "evaluate":
            sub.add_argument("--annotations", required=True, help="JSON-lines annotation file")
            sub.add_argument("--eval-mode", choices=("P", "L"), default="P",
                             help="P: predicted classes, L: all annotated labels")
        if name == "inspect":
            sub.add_argument("--dump-grads", help="write per-layer gradients to this .rspw path")
    args = parser.parse_args(argv)

    try:
        manifest = _build_manifest(args)
        if args.command == "attribute":
            return cmd_attribute(manifest)
        if args.command == "evaluate":
            annotations = E.load_annotations(args.annotations)
            return cmd_evaluate(manifest, annotations, args.eval_mode)
        if args.command == "sanity":
            return cmd_sanity(manifest)
        if args.command == "inspect":
            dump = Path(args.dump_grads) if args.dump_grads else None
            return cmd_inspect(manifest, dump)
        raise ValueError(f"unknown command {args.command}")
    except (ValueError, OSError) as e:
        print(f"rsp: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
