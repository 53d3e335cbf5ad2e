"""End-to-end walkthrough on the built-in two-quadrant toy problem.

The toy scene puts class-A evidence (a bright blob) in the top-left image
quadrant and class-B evidence in the bottom-right, on top of background
noise.  We attribute class A with class B hostile and watch the signed
relevance separate: positive mass over the A blob, negative mass over the B
blob, background pushed slightly negative, with the total conserved at 1.

Run:  python demos/two_quadrant_walkthrough.py
Outputs land in demos/out/.
"""

from pathlib import Path

import numpy as np

from rsp import evalkit as E
from rsp import model as M
from rsp import propagate as P
from rsp import relmap as RM
from rsp import toys
from rsp.relmap import ClassSpec

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

model, weights = toys.two_quadrant_model()
image, annotation = toys.two_quadrant_sample(np.random.default_rng(7), "demo")

# 1. Forward pass: both blobs present, so both classes are predicted.
trace = M.forward_trace(model, weights, image)
print("logits:", dict(zip(model.class_names, trace.logits.round(3))))

# 2. The relative map at the feature-stage end layer contrasts the target's
#    gradient activation map against the hostile one, then purging removes
#    units whose sign conflicts with their position's channel sum.
spec = ClassSpec(target=0, hostiles=(1,))
f = RM.relative_map(model, weights, trace, spec)
f_purged = RM.purge(f)
start = RM.normalize_sections(f_purged)
print(f"relative map: {int((f > 0).sum())} positive / {int((f < 0).sum())} negative units")
print(f"after purge:  {int((f_purged > 0).sum())} / {int((f_purged < 0).sum())}, "
      f"sections scaled to +2 / -1 (sum {start.total():.6f})")

# 3. Backward propagation to pixels, conservation audited at every step.
result = P.run_rsp(model, weights, image, spec, trace=trace)
print("\nconservation audit (total relevance alive after each layer):")
for row in result.audit:
    print(f"  {row.layer:>8s}: {row.frontier_sum:+.8f}  {'ok' if row.ok else 'VIOLATION'}")

# 4. The signed pixel map: strong positive over the A blob, negative over B.
pm = result.pixel_map
print(f"\ntarget-quadrant relevance:  {pm[toys.TARGET_QUADRANT].sum():+.4f}")
print(f"hostile-quadrant relevance: {pm[toys.HOSTILE_QUADRANT].sum():+.4f}")

# 5. Localization scoring against the blob boxes.
hit = E.pointing_game(pm, annotation, 0, tolerance_px=2)
iou = E.miou_bbox(E.positive_mask(pm, thresholded=True), annotation, 0)
grad = RM.gradient_saliency(model, weights, trace, 0)
iou_grad = E.miou_bbox(E.positive_mask(grad, thresholded=True), annotation, 0)
print(f"\npointing game hit: {hit}")
print(f"thresholded IoU:   {iou:.3f}  (plain-gradient baseline: {iou_grad:.3f})")

# 6. Render heatmaps: the bi-polar map, the swapped-target map, and the
#    Grad-CAM baseline for comparison.
(out_dir / "demo_A_rsp.png").write_bytes(E.render_heatmap(pm, underlay=None))
swapped = P.run_rsp(model, weights, image, ClassSpec(target=1, hostiles=(0,)), trace=trace)
(out_dir / "demo_B_rsp.png").write_bytes(E.render_heatmap(swapped.pixel_map))
cam = RM.gradcam_heatmap(model, weights, trace, 0)
(out_dir / "demo_A_gradcam.png").write_bytes(E.render_heatmap(cam))
print(f"\nheatmaps written to {out_dir}/")
