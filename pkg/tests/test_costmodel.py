"""Closed-form cost, efficiency and isoefficiency tests."""

import math

import numpy as np
import pytest

import summagrid as sg
from conftest import build_layer, layer_cfg, run_layer_fwd_bwd
from summagrid import costmodel
from summagrid.costmodel import (
    CSV_HEADER,
    EfficiencyPoint,
    cost_table,
    costs_1d,
    costs_2d,
    efficiency,
    isoefficiency_required_w,
    isoefficiency_roundtrip,
    rows_to_csv,
    scaling_table,
)
from summagrid.errors import ConfigError
from summagrid.layers import ModelConfig


CFG = ModelConfig(b=2, s=8, h=16, n=4, v=16, num_layers=1)


class TestCosts1d:
    def test_p1_zero_comm(self):
        cb = costs_1d(CFG, 1)
        assert cb.fwd_comm == 0.0 and cb.bwd_comm == 0.0

    def test_p4_forward_comm(self):
        assert costs_1d(CFG, 4).fwd_comm == 768.0  # 4*(3/4)*2*8*16

    def test_p4_forward_comp(self):
        assert costs_1d(CFG, 4).fwd_comp == 53248 / 4  # (12bsh^2+2bs^2h)/p = 13312

    def test_ratio_laws(self):
        cb = costs_1d(CFG, 16, beta=2.5)
        assert cb.bwd_comm == 2.0 * cb.fwd_comm
        assert cb.bwd_comp == 3.0 * cb.fwd_comp


class TestCosts2d:
    def test_p1_zero_comm(self):
        cb = costs_2d(CFG, 1)
        assert cb.fwd_comm == 0.0

    def test_p4_forward_comm(self):
        # (log2(4)/(2*2)) * (7*2*8*16 + 12*256) = 0.5 * 4864 = 2432
        assert costs_2d(CFG, 4).fwd_comm == 2432.0

    def test_p4_backward_is_three_times(self):
        cb = costs_2d(CFG, 4)
        assert cb.bwd_comm == 7296.0
        assert cb.bwd_comm == 3.0 * cb.fwd_comm

    def test_requires_square_p(self):
        with pytest.raises(ConfigError):
            costs_2d(CFG, 8)

    def test_computation_parity_across_schemes(self):
        for p in (1, 4, 16):
            a, b = costs_1d(CFG, p), costs_2d(CFG, p)
            assert a.fwd_comp == b.fwd_comp and a.bwd_comp == b.bwd_comp


class TestEfficiency:
    def test_no_comm_is_perfect(self):
        assert efficiency(100.0, 8, 0.0).e == 1.0

    def test_half_efficiency_point(self):
        pt = efficiency(100.0, 4, 25.0)  # p*t_comm == W
        assert pt.e == 0.5

    def test_arithmetic(self):
        pt = efficiency(1000.0, 4, 50.0)
        assert abs(pt.e - 1.0 / 1.2) <= 1e-15
        assert pt.t_p == 1000.0 / 4 + 50.0

    def test_domain(self):
        with pytest.raises(ConfigError):
            efficiency(0.0, 4, 1.0)


class TestIsoefficiency:
    def _ref(self, p, w=1000.0):
        return EfficiencyPoint(p=p, w=w, t_comm=0.0, t_p=0.0, e=1.0)

    def test_1d_growth_4_to_16(self):
        assert isoefficiency_required_w("1d", 16, self._ref(4)) == 1000.0 * 64.0

    def test_2d_growth_16_to_64(self):
        # ((sqrt(64)*log2 64)/(sqrt(16)*log2 16))^3 = (48/16)^3 = 27, exactly
        w = isoefficiency_required_w("2d", 64, self._ref(16))
        assert w == 1000.0 * 27.0

    def test_2d_growth_4_to_16_matches_1d(self):
        # (16/4)^3 = 64 at this particular pair
        assert isoefficiency_required_w("2d", 16, self._ref(4)) == 1000.0 * 64.0

    def test_2d_reference_at_p1_is_domain_error(self):
        with pytest.raises(ConfigError):
            isoefficiency_required_w("2d", 4, self._ref(1))

    def test_roundtrip_2d_within_ten_percent(self):
        base = ModelConfig(b=4, s=8, h=64, n=4, v=16, num_layers=1)
        for p in (16, 64):
            r0, r = isoefficiency_roundtrip("2d", base, 4, p)
            assert abs(r / r0 - 1.0) <= 0.10

    def test_roundtrip_1d_within_ten_percent(self):
        base = ModelConfig(b=4, s=8, h=64, n=4, v=16, num_layers=1)
        for p in (16, 64):
            r0, r = isoefficiency_roundtrip("1d", base, 4, p)
            assert abs(r / r0 - 1.0) <= 0.10


class TestScalingTable:
    BASE = ModelConfig(b=48, s=512, h=1024, n=2, v=64, num_layers=1)

    def test_p1_rows_identical_t_p(self):
        rows = scaling_table("strong", self.BASE, [1])
        t_ps = {r["scheme"]: r["T_p"] for r in rows}
        assert t_ps["1d"] == t_ps["2d"]

    def test_strong_1d_comm_constantish_2d_decaying(self):
        rows = scaling_table("strong", self.BASE, [4, 16, 36, 64])
        one_d = [r for r in rows if r["scheme"] == "1d"]
        two_d = [r for r in rows if r["scheme"] == "2d"]
        bsh = self.BASE.b * self.BASE.s * self.BASE.h
        for r in one_d:  # 12(p-1)/p * bsh stays within [9, 12] * bsh
            total = r["fwd_comm"] + r["bwd_comm"]
            assert 9.0 * bsh <= total <= 12.0 * bsh
        comm = [r["fwd_comm"] + r["bwd_comm"] for r in two_d]
        # monotone decrease; note log2(p)/(2 sqrt p) ties exactly at p=4,16
        for a, b in zip(comm, comm[1:]):
            assert b <= a
        assert comm[0] == comm[1]
        assert comm[1] > comm[2] > comm[3]

    def test_strong_efficiency_monotone_formula(self):
        rows = scaling_table("strong", self.BASE, [4, 16, 36, 64])
        for r in rows:
            w = (r["fwd_comp"] + r["bwd_comp"]) * r["p"]
            expect = efficiency(w, r["p"], r["fwd_comm"] + r["bwd_comm"]).e
            assert abs(r["efficiency"] - expect) <= 1e-12

    def test_weak_training_crossover_at_p64(self):
        """Training throughput (fwd+bwd): the 2d advantage appears at p=64
        under the canonical pattern; forward-only crosses at p=16."""
        rows = scaling_table("weak", self.BASE, [4, 16, 36, 64])
        ratio = {r["p"]: r["throughput_ratio"] for r in rows if r["scheme"] == "2d"}
        fwd = {r["p"]: r["forward_ratio"] for r in rows if r["scheme"] == "2d"}
        assert ratio[4] < 1.0 and ratio[16] < 1.0 and ratio[36] < 1.0
        assert ratio[64] > 1.0
        assert fwd[4] < 1.0
        assert fwd[16] >= 1.0 and fwd[36] > 1.0 and fwd[64] > 1.0

    def test_weak_divisibility_reported_not_fixed(self):
        rows = scaling_table("weak", self.BASE, [4, 16, 36, 64])
        ok = {(r["scheme"], r["p"]): r["config_ok"] for r in rows}
        # n = 2p scales past divisibility of h = 1024q at p=36 (6144 % 72 != 0)
        assert ok[("2d", 16)] is True
        assert ok[("2d", 36)] is False

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            scaling_table("sideways", self.BASE, [4])


class TestCsv:
    def test_header_exact(self):
        rows = cost_table(CFG, [1, 4])
        text = rows_to_csv(rows)
        assert text.split("\n", 1)[0] == CSV_HEADER
        assert CSV_HEADER == ("scheme,p,q,b,s,h,n,fwd_comm,bwd_comm,"
                              "fwd_comp,bwd_comp,T_p,efficiency")

    def test_byte_stable(self):
        a = rows_to_csv(cost_table(CFG, [1, 4, 16]))
        b = rows_to_csv(cost_table(CFG, [1, 4, 16]))
        assert a == b

    def test_p4_row_values(self):
        text = rows_to_csv(cost_table(CFG, [4]))
        row = [ln for ln in text.strip().split("\n") if ln.startswith("2d,4,")][0]
        fields = dict(zip(CSV_HEADER.split(","), row.split(",")))
        assert float(fields["fwd_comm"]) == 2432.0
        assert float(fields["bwd_comm"]) == 7296.0
        assert float(fields["fwd_comp"]) == 13312.0


class TestLedgerConformance:
    def test_mesh_layer_matches_formulas(self):
        for q in (2, 4):
            cfg = layer_cfg(q=q)
            mesh, model, layer, _ = build_layer(q, cfg)
            r0, r1, r2, _ = run_layer_fwd_bwd(mesh, layer, cfg)
            fwd = r1.minus(r0)
            bwd = r2.minus(r1)
            pred = costs_2d(cfg, q * q)
            assert np.max(np.abs(fwd.tag_cost("summa") - pred.fwd_comm)) \
                <= 1e-9 * pred.fwd_comm
            assert np.max(np.abs(bwd.tag_cost("summa") - pred.bwd_comm)) \
                <= 1e-9 * pred.bwd_comm
            assert np.all(fwd.macs == int(pred.fwd_comp))
            assert np.all(bwd.macs == int(pred.bwd_comp))

    def test_baseline_matches_formulas(self):
        from summagrid.baseline import Baseline1DLayer
        from summagrid import dense
        from summagrid.membuf import Workspace
        from summagrid.model import init_global_params
        for q in (2, 4):
            cfg = ModelConfig(b=4, s=4, h=32, n=q * q, v=16, num_layers=1)
            params = init_global_params(cfg, 1)
            lp = {k.split(".", 2)[-1]: v for k, v in params.items()
                  if k.startswith("layers.0.")}
            mesh = sg.create_mesh(sg.MeshConfig(q=q))
            bl = Baseline1DLayer(mesh, cfg, lp)
            ws = Workspace(mesh.p)
            x = dense.make_rng(2).standard_normal((cfg.b * cfg.s, cfg.h))
            r0 = sg.ledger_report(mesh)
            _, saved = bl.forward(x, ws)
            r1 = sg.ledger_report(mesh)
            # backward with checkpoint recompute: forward again, then backward
            _, saved2 = bl.forward(x, ws)
            bl.backward(dense.make_rng(3).standard_normal(x.shape), saved2, ws)
            r2 = sg.ledger_report(mesh)
            fwd = r1.minus(r0)
            bwd = r2.minus(r1)
            pred = costs_1d(cfg, mesh.p)
            assert np.max(np.abs(fwd.allreduce_cost - pred.fwd_comm)) \
                <= 1e-9 * pred.fwd_comm
            assert np.max(np.abs(bwd.allreduce_cost - pred.bwd_comm)) \
                <= 1e-9 * pred.bwd_comm
            assert np.all(fwd.macs == int(pred.fwd_comp))
            assert np.all(bwd.macs == int(pred.bwd_comp))
