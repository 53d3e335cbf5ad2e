"""Exporter release criteria: real-architecture parity through the engine CLI.

Engine forward logits must match the (float64) framework reference within
1e-4 absolute per element on probe images for both supported architecture
families, and the autograd oracle must bound every per-layer vJp at 1e-3
relative error.
"""

import json

import numpy as np
import pytest
import torch

from rsp_export import export_model
from rsp_export.export import simulate_descriptor
from rsp_export.oracle import oracle_check, random_torch_net, run_engine_inspect
from rsp_export.rspw import read_rspw


@pytest.mark.parametrize("arch", ["vgg16", "resnet50"])
def test_engine_parity_on_real_architecture(arch, tmp_path):
    import torchvision.models as tvm

    torch.manual_seed(0)
    model = (tvm.vgg16 if arch == "vgg16" else tvm.resnet50)(weights=None).eval()
    probe = np.random.default_rng(1).uniform(0, 1, (3, 224, 224)).astype(np.float32)
    desc, blob, report = export_model(model, [probe], arch=arch)
    assert report.max_abs_logit_deviation <= 1e-4

    engine_logits, _, _ = run_engine_inspect(desc, blob, probe, tmp_path / arch,
                                             dump_grads=False)
    reference, _ = simulate_descriptor(json.loads(desc), read_rspw(blob), probe)
    deviation = float(np.abs(engine_logits - reference.detach().numpy()).max())
    assert deviation <= 1e-4
    print(f"\n[PASS] {arch} parity: engine vs framework max abs deviation {deviation:.2e}")


def test_oracle_vjp_bound(tmp_path):
    model, input_shape, probe = random_torch_net(seed=0)
    desc, blob, _ = export_model(model, [probe], arch="custom", input_shape=input_shape)
    report = oracle_check(desc, blob, probe, n_random_nets=4, workdir=tmp_path)
    assert report.max_forward_rel_err <= 1e-4
    assert report.max_vjp_rel_err <= 1e-3
    print(f"\n[PASS] oracle: forward rel err {report.max_forward_rel_err:.2e}, "
          f"vJp rel err {report.max_vjp_rel_err:.2e} over {len(report.rows)} nets")
