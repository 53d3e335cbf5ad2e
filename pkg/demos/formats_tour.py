"""The two portable artifacts: model descriptor JSON and the .rspw archive.

A model travels as two files: a human-readable descriptor (rsp-model/1) and
a little-endian binary weight archive ("RSPW" magic).  This script builds a
tiny model, writes both, hexdumps the archive header, and shows the
validation report that cross-checks them.

Run:  python demos/formats_tour.py
"""

from pathlib import Path

import numpy as np

from rsp import model as M
from rsp import toys
from rsp import weights_io as W

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

model, weights = toys.identity_net(channels=2, size=4)

# descriptor: versioned JSON, layers in execution order
text = M.descriptor_to_json(model)
(out_dir / "identity.json").write_text(text)
print("descriptor (rsp-model/1):")
print("\n".join("  " + line for line in text.splitlines()[:12]))
print("  ...\n")

# archive: magic, version, count, then (name, rank, dims, f32 payload) entries
blob = W.write_archive(weights)
(out_dir / "identity.rspw").write_bytes(blob)
print(f"archive: {len(blob)} bytes")
head = blob[:32]
print("  header bytes:", " ".join(f"{b:02x}" for b in head))
print(f"  magic={blob[:4]!r} version={int.from_bytes(blob[4:8], 'little')} "
      f"entries={int.from_bytes(blob[8:12], 'little')}\n")

# round trip is bitwise
back = W.read_archive(blob)
assert W.write_archive(back) == blob
print("write(read(bytes)) == bytes:", W.write_archive(back) == blob)

# validation cross-checks names and shapes both ways
report = W.validate_against_descriptor(weights, model)
print("matching pair ->", "empty report" if report.ok() else report.lines())

broken = {k: v for k, v in weights.items()}
broken["stray"] = np.zeros(3, dtype=np.float32)
del broken["conv1.weight"]
report = W.validate_against_descriptor(broken, model)
print("broken pair  ->")
for line in report.lines():
    print("   ", line)
