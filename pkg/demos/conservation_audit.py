"""Conservation across random network topologies.

The backward engine must hand exactly the seeded relevance total (here 1.0)
from layer to layer, whatever mix of conv / relu / max-pool / avg-pool /
residual blocks it crosses.  This script generates random small nets and
prints the audited total after every propagation step.

Run:  python demos/conservation_audit.py
"""

import numpy as np

from rsp import model as M
from rsp import propagate as P
from rsp import toys
from rsp.relmap import ClassSpec

for seed in (0, 1, 5, 8):
    model, weights, image = toys.random_toy_net(seed)
    kinds = " -> ".join(l.kind for l in model.layers)
    print(f"net {seed}: {kinds}")
    trace = M.forward_trace(model, weights, image)

    # attribute the highest-logit class against one random hostile (if any)
    target = int(np.argmax(trace.logits))
    others = [c for c in range(len(trace.logits)) if c != target]
    spec = ClassSpec(target=target, hostiles=(others[0],))
    try:
        result = P.run_rsp(model, weights, image, spec, trace=trace)
    except ValueError as e:
        print(f"  skipped: {e}\n")
        continue
    for row in result.audit:
        drift = abs(row.frontier_sum - 1.0)
        print(f"  after {row.layer:>8s}: total {row.frontier_sum:+.9f}   drift {drift:.2e}")
    print(f"  conserved: {result.conserved()}\n")
