"""Weight-randomization sensitivity (the saliency sanity check).

A trustworthy attribution must depend on what the model learned: as weights
are re-initialized in a cascade from the output layer backwards, the maps
should fall apart.  This script prints the Spearman correlation of each
stage's map against the original and renders one heatmap per stage.

Run:  python demos/sanity_randomization.py
Outputs land in demos/out/.
"""

from pathlib import Path

import numpy as np

from rsp import evalkit as E
from rsp import toys
from rsp.relmap import ClassSpec

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

model, weights = toys.two_quadrant_model()
image, _ = toys.two_quadrant_sample(np.random.default_rng(11), "demo")
spec = ClassSpec(target=0, hostiles=(1,))

curve = E.sanity_curve(model, weights, image, spec, seed=4)
print("randomized through   spearman vs original")
for k, (layer, rho, stage_map) in enumerate(curve):
    print(f"  {layer:>8s}            {rho:+.3f}")
    png = E.render_heatmap(stage_map)
    (out_dir / f"sanity_{k}_{layer}.png").write_bytes(png)

print(f"\nstage heatmaps written to {out_dir}/")
print("stage 0 is untouched (rho = 1); by full randomization the map should "
      "be uncorrelated noise.")
