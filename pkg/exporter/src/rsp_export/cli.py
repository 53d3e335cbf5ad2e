"""Exporter command line.

    rsp-export export --arch {vgg16,resnet50,custom} --out-dir DIR
                      [--probes N] [--seed S] [--oracle-nets K]

Emits model.json, weights.rspw and report.json into the output directory.
With --oracle-nets > 0 the exported pair (and K random nets) are also
cross-checked against the engine CLI, adding oracle.json.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .export import ExportError, export_model
from .oracle import EngineError, oracle_check


def _build_model(arch: str, seed: int):
    torch.manual_seed(seed)
    if arch == "vgg16":
        import torchvision.models as tvm

        return tvm.vgg16(weights=None).eval(), (3, 224, 224)
    if arch == "resnet50":
        import torchvision.models as tvm

        return tvm.resnet50(weights=None).eval(), (3, 224, 224)
    if arch == "custom":
        model = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(8, 12, 3, padding=1), nn.ReLU(),
            nn.Conv2d(12, 12, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(12, 5),
        ).eval()
        return model, (3, 32, 32)
    raise ExportError(f"unknown architecture '{arch}'")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rsp-export", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    ex = subs.add_parser("export")
    ex.add_argument("--arch", choices=("vgg16", "resnet50", "custom"), required=True)
    ex.add_argument("--out-dir", required=True)
    ex.add_argument("--probes", type=int, default=2, help="number of probe images")
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--oracle-nets", type=int, default=0,
                    help="also cross-check this many random nets via the engine CLI")
    args = parser.parse_args(argv)

    try:
        model, input_shape = _build_model(args.arch, args.seed)
        rng = np.random.default_rng(args.seed)
        probes = [rng.uniform(0.0, 1.0, size=input_shape).astype(np.float32)
                  for _ in range(max(1, args.probes))]
        descriptor, archive, report = export_model(model, probes, arch=args.arch,
                                                   input_shape=input_shape)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "model.json").write_text(descriptor)
        (out / "weights.rspw").write_bytes(archive)
        (out / "report.json").write_text(report.to_json())
        print(f"exported {args.arch}: {len(report.tensor_shapes)} tensors, "
              f"max probe deviation {report.max_abs_logit_deviation:.3e}")
        if args.oracle_nets > 0:
            oracle = oracle_check(descriptor, archive, probes[0], args.oracle_nets,
                                  out / "oracle")
            (out / "oracle.json").write_text(oracle.to_json())
            print(f"oracle: forward rel err {oracle.max_forward_rel_err:.3e}, "
                  f"vJp rel err {oracle.max_vjp_rel_err:.3e}, "
                  f"{'ok' if oracle.ok() else 'FAILED'}")
            if not oracle.ok():
                return 1
        return 0
    except (ExportError, EngineError, OSError, ValueError) as e:
        print(f"rsp-export: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
