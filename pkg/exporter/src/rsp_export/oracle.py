"""Numerical cross-check of the attribution engine against torch autograd.

The engine is driven purely through its command line (`python -m rsp.cli
inspect`), which emits forward logits as JSON and per-layer gradients of the
top logit as a .rspw archive.  The same descriptor is re-executed here with
torch in float64, autograd supplies the reference gradients, and the report
carries the worst relative errors.
"""

from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .export import export_sequential, simulate_descriptor
from .rspw import read_rspw, write_rspw


class EngineError(RuntimeError):
    pass


@dataclass
class OracleRow:
    name: str
    forward_rel_err: float
    vjp_rel_err: float


@dataclass
class OracleReport:
    rows: list[OracleRow] = field(default_factory=list)
    forward_tolerance: float = 1e-4
    vjp_tolerance: float = 1e-3

    @property
    def max_forward_rel_err(self) -> float:
        return max((r.forward_rel_err for r in self.rows), default=0.0)

    @property
    def max_vjp_rel_err(self) -> float:
        return max((r.vjp_rel_err for r in self.rows), default=0.0)

    def ok(self) -> bool:
        return (self.max_forward_rel_err <= self.forward_tolerance
                and self.max_vjp_rel_err <= self.vjp_tolerance)

    def to_json(self) -> str:
        return json.dumps({
            "rows": [{"name": r.name, "forward_rel_err": r.forward_rel_err,
                      "vjp_rel_err": r.vjp_rel_err} for r in self.rows],
            "max_forward_rel_err": self.max_forward_rel_err,
            "max_vjp_rel_err": self.max_vjp_rel_err,
            "passed": self.ok(),
        }, indent=2, sort_keys=True) + "\n"


def run_engine_inspect(descriptor_json: str, archive: bytes, image: np.ndarray,
                       workdir: Path, dump_grads: bool = True):
    """Invoke the engine CLI on a (descriptor, archive, image) triple.

    Returns (logits, gradient class or None, {tensor name: gradient}).
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "model.json").write_text(descriptor_json)
    (workdir / "weights.rspw").write_bytes(archive)
    np.save(workdir / "probe.npy", image.astype(np.float32))
    cmd = [sys.executable, "-m", "rsp.cli", "inspect",
           "--model", str(workdir / "model.json"),
           "--weights", str(workdir / "weights.rspw"),
           "--image", str(workdir / "probe.npy"),
           "--out", str(workdir / "out")]
    if dump_grads:
        cmd += ["--dump-grads", str(workdir / "grads.rspw")]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EngineError(f"engine inspect failed (exit {proc.returncode}): {proc.stderr.strip()}")
    doc = json.loads((workdir / "out" / "inspect.json").read_text())
    logits = np.asarray(doc["logits"], dtype=np.float64)
    grads = {}
    target = None
    if dump_grads:
        target = int(doc["gradient_class"])
        raw = read_rspw((workdir / "grads.rspw").read_bytes())
        grads = {name.removeprefix("grad/"): value for name, value in raw.items()}
    return logits, target, grads


def _rel_err(got: np.ndarray, ref: np.ndarray) -> float:
    scale = max(float(np.abs(ref).max()), 1e-12)
    return float(np.abs(got.astype(np.float64) - ref).max() / scale)


def check_pair(descriptor_json: str, archive: bytes, image: np.ndarray,
               workdir: Path, name: str = "net") -> OracleRow:
    """One engine-vs-autograd comparison.

    The engine folds batchnorm into the preceding conv, so for a conv that
    feeds a batchnorm the engine's conv output corresponds to the
    simulation's batchnorm output; gradients are compared through that alias.
    """
    doc = json.loads(descriptor_json)
    weights = read_rspw(archive)
    engine_logits, target, engine_grads = run_engine_inspect(
        descriptor_json, archive, image, workdir)

    ref_logits, vals = simulate_descriptor(doc, weights, image, capture=True)
    forward_err = _rel_err(engine_logits, ref_logits.detach().numpy())

    alias = {layer["inputs"][0]: layer["name"]
             for layer in doc["layers"] if layer["kind"] == "batchnorm"}
    ref_logits[target].backward()
    vjp_err = 0.0
    for engine_name, got in engine_grads.items():
        value = vals[alias.get(engine_name, engine_name)]
        ref = value.grad
        ref = np.zeros(value.shape, dtype=np.float64) if ref is None else ref.detach().numpy()
        vjp_err = max(vjp_err, _rel_err(got, ref))
    if not engine_grads:
        raise EngineError("engine reported no gradients")
    return OracleRow(name=name, forward_rel_err=forward_err, vjp_rel_err=vjp_err)


def random_torch_net(seed: int):
    """Small random conv stack (no batchnorm: tensor names then match the
    engine's folded graph one-to-one)."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    c_in = int(rng.integers(1, 4))
    size = int(rng.integers(10, 15))
    chans = [c_in] + [int(rng.integers(3, 7)) for _ in range(int(rng.integers(2, 4)))]
    layers: list[nn.Module] = []
    for i in range(1, len(chans)):
        layers += [nn.Conv2d(chans[i - 1], chans[i], 3, padding=1), nn.ReLU()]
        if i == 1 and size >= 8:
            layers.append(nn.MaxPool2d(2, 2))
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(chans[-1], 3)]
    model = nn.Sequential(*layers).eval()
    image = rng.uniform(0.05, 1.0, size=(c_in, size, size)).astype(np.float32)
    return model, (c_in, size, size), image


def oracle_check(descriptor_json: str, archive: bytes, image: np.ndarray,
                 n_random_nets: int, workdir: Path) -> OracleReport:
    """Check the given pair, then ``n_random_nets`` freshly exported nets."""
    workdir = Path(workdir)
    report = OracleReport()
    report.rows.append(check_pair(descriptor_json, archive, image,
                                  workdir / "given", name="given"))
    for k in range(n_random_nets):
        model, input_shape, probe = random_torch_net(seed=1000 + k)
        doc, weights, _ = export_sequential(copy_double(model), input_shape)
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        report.rows.append(check_pair(text, write_rspw(weights), probe,
                                      workdir / f"net{k}", name=f"random{k}"))
    return report


def copy_double(model: nn.Module) -> nn.Module:
    import copy

    return copy.deepcopy(model).double().eval()
