"""Engine-vs-autograd oracle, including the corrupted-archive negative control."""

import json

import numpy as np
import pytest
import torch
from torch import nn

from rsp_export import export_model
from rsp_export.oracle import (check_pair, oracle_check, random_torch_net,
                               run_engine_inspect)
from rsp_export.export import simulate_descriptor
from rsp_export.rspw import read_rspw, write_rspw


def identity_module():
    m = nn.Sequential(nn.Conv2d(2, 2, 1, bias=False), nn.ReLU(),
                      nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                      nn.Linear(2, 2, bias=False)).eval()
    with torch.no_grad():
        m[0].weight.copy_(torch.eye(2).reshape(2, 2, 1, 1))
        m[4].weight.copy_(torch.eye(2))
    return m


class TestCheckPair:
    def test_identity_net_matches_exactly(self, tmp_path):
        probe = np.random.default_rng(0).uniform(0.1, 1.0, (2, 6, 6)).astype(np.float32)
        desc, blob, _ = export_model(identity_module(), [probe], arch="custom",
                                     input_shape=(2, 6, 6))
        row = check_pair(desc, blob, probe, tmp_path, "identity")
        assert row.forward_rel_err <= 1e-7
        assert row.vjp_rel_err <= 1e-7

    def test_random_three_layer_net(self, tmp_path):
        model, input_shape, probe = random_torch_net(seed=42)
        desc, blob, _ = export_model(model, [probe], arch="custom", input_shape=input_shape)
        row = check_pair(desc, blob, probe, tmp_path, "rand")
        assert row.forward_rel_err <= 1e-4
        assert row.vjp_rel_err <= 1e-3

    def test_corrupted_archive_detected(self, tmp_path):
        model, input_shape, probe = random_torch_net(seed=7)
        desc, blob, _ = export_model(model, [probe], arch="custom", input_shape=input_shape)
        doc = json.loads(desc)
        clean_logits, _ = simulate_descriptor(doc, read_rspw(blob), probe)

        corrupted = read_rspw(blob)
        conv_name = next(k for k in corrupted if k.endswith("0.weight"))
        corrupted[conv_name] = corrupted[conv_name] + 0.5
        engine_logits, _, _ = run_engine_inspect(desc, write_rspw(corrupted), probe,
                                                 tmp_path, dump_grads=False)
        deviation = float(np.abs(engine_logits - clean_logits.detach().numpy()).max())
        assert deviation > 1e-3  # mismatch is detected, not silently absorbed


class TestOracleCheck:
    def test_given_plus_random_nets_pass(self, tmp_path):
        model, input_shape, probe = random_torch_net(seed=0)
        desc, blob, _ = export_model(model, [probe], arch="custom", input_shape=input_shape)
        report = oracle_check(desc, blob, probe, n_random_nets=3, workdir=tmp_path)
        assert len(report.rows) == 4
        assert report.max_forward_rel_err <= 1e-4
        assert report.max_vjp_rel_err <= 1e-3
        assert report.ok()
        parsed = json.loads(report.to_json())
        assert parsed["passed"] is True
