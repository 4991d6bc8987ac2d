"""End-to-end mesh-vs-serial equivalence, checkpoint file, classifier branch,
1d-baseline numerics, and mode determinism."""

import numpy as np
import pytest

import summagrid as sg
from conftest import make_mesh, make_ws
from summagrid import dense, oracle
from summagrid.baseline import Baseline1DLayer
from summagrid.errors import ConfigError
from summagrid.layers import ModelConfig
from summagrid.membuf import Workspace
from summagrid.model import (
    MeshModel,
    init_global_params,
    load_checkpoint,
    run_loss_and_grads,
    save_checkpoint,
)
from summagrid.summa import gather, scatter

CFG = ModelConfig(b=6, s=8, h=48, n=6, v=36, num_layers=2)


def _data(cfg, seed):
    rng = dense.make_rng(seed)
    return (rng.integers(0, cfg.v, size=(cfg.b, cfg.s)),
            rng.integers(0, cfg.v, size=(cfg.b, cfg.s)))


class TestParamScattering:
    def test_gathered_params_bit_identical_to_globals(self):
        params = init_global_params(CFG, 23)
        for q in (1, 2, 3):
            mesh = make_mesh(q)
            model = MeshModel(mesh, CFG, params)
            back = model.gather_params()
            for k, v in params.items():
                assert np.array_equal(back[k], v), k

    def test_stream_independent_of_mesh_and_padding(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=30, num_layers=1)  # pads at q=4
        params = init_global_params(cfg, 7)
        mesh = make_mesh(4)
        model = MeshModel(mesh, cfg, params)
        assert model.table.global_rows == 32
        assert np.array_equal(model.gather_params()["table"], params["table"])


class TestEndToEnd:
    def test_mesh_matches_oracle_q123(self):
        params = init_global_params(CFG, 23)
        tokens, labels = _data(CFG, 23)
        serial = oracle.SerialModel(CFG, params)
        ref_loss, saved = oracle.serial_forward(serial, tokens, labels)
        ref_grads = oracle.serial_backward(serial, saved)
        for q in (1, 2, 3):
            mesh = make_mesh(q)
            model = MeshModel(mesh, CFG, params)
            loss, grads, _, _ = run_loss_and_grads(model, tokens, labels)
            assert abs(loss - ref_loss) <= 1e-9
            g = model.gather_grads(grads)
            for k in ref_grads:
                assert np.max(np.abs(g[k] - ref_grads[k])) <= 1e-8, (q, k)

    def test_loss_independent_of_mesh_size(self):
        params = init_global_params(CFG, 23)
        tokens, labels = _data(CFG, 23)
        losses = []
        for q in (1, 2, 3):
            model = MeshModel(make_mesh(q), CFG, params)
            loss, _, _, _ = run_loss_and_grads(model, tokens, labels)
            losses.append(loss)
        assert max(losses) - min(losses) <= 1e-10

    def test_depth_zero_model(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=0)
        params = init_global_params(cfg, 11)
        tokens, labels = _data(cfg, 11)
        model = MeshModel(make_mesh(2), cfg, params)
        loss, grads, _, _ = run_loss_and_grads(model, tokens, labels)
        serial = oracle.SerialModel(cfg, params)
        ref_loss, saved = oracle.serial_forward(serial, tokens, labels)
        ref = oracle.serial_backward(serial, saved)
        assert abs(loss - ref_loss) <= 1e-12
        assert np.max(np.abs(model.gather_grads(grads)["table"] - ref["table"])) <= 1e-10

    def test_invalid_divisibility_raises(self):
        cfg = ModelConfig(b=4, s=4, h=15, n=3, v=16, num_layers=1)
        with pytest.raises(ConfigError):
            cfg.validate_mesh(2)

    def test_golden_file_cross_check(self, tmp_path):
        cfg = ModelConfig(b=4, s=8, h=16, n=4, v=32, num_layers=2)
        params = init_global_params(cfg, 23)
        tokens, labels = _data(cfg, 23)
        serial = oracle.SerialModel(cfg, params)
        loss, saved = oracle.serial_forward(serial, tokens, labels)
        grads = oracle.serial_backward(serial, saved)
        path = tmp_path / "seed23.golden"
        oracle.write_golden(path, cfg, 23, loss, grads)
        golden = oracle.read_golden(path)
        model = MeshModel(make_mesh(2), cfg, params)
        mesh_loss, mesh_grads, _, _ = run_loss_and_grads(model, tokens, labels)
        assert oracle.compare_golden(golden, mesh_loss,
                                     model.gather_grads(mesh_grads), tol=1e-8) == []


class TestClassifierBranch:
    def test_two_branch_loss_matches_oracle(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 31, classifier=True)
        tokens, labels = _data(cfg, 31)
        cls_labels = dense.make_rng(32).integers(0, 2, size=cfg.b)
        serial = oracle.SerialModel(cfg, params, classifier=True)
        ref_loss, saved = oracle.serial_forward(serial, tokens, labels, cls_labels)
        ref_grads = oracle.serial_backward(serial, saved)
        for q in (1, 2):
            model = MeshModel(make_mesh(q), cfg, params, classifier=True)
            loss, grads, _, _ = run_loss_and_grads(model, tokens, labels,
                                                   cls_labels=cls_labels)
            assert abs(loss - ref_loss) <= 1e-10
            g = model.gather_grads(grads)
            for k in ref_grads:
                assert np.max(np.abs(g[k] - ref_grads[k])) <= 1e-8, (q, k)

    def test_missing_cls_labels(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 31, classifier=True)
        model = MeshModel(make_mesh(2), cfg, params, classifier=True)
        tokens, labels = _data(cfg, 31)
        with pytest.raises(ConfigError):
            model.forward(tokens, labels, model.make_workspace())


class TestBaselineNumerics:
    def test_p1_is_serial(self):
        cfg = ModelConfig(b=2, s=4, h=8, n=1, v=8, num_layers=1)
        params = init_global_params(cfg, 29)
        lp = {k.split(".", 2)[-1]: v for k, v in params.items()
              if k.startswith("layers.0.")}
        mesh = make_mesh(1)
        bl = Baseline1DLayer(mesh, cfg, lp)
        x = dense.make_rng(29).standard_normal((cfg.b * cfg.s, cfg.h))
        y, _ = bl.forward(x, make_ws(mesh))
        assert sg.ledger_report(mesh).comm_cost().sum() == 0.0
        serial = oracle.SerialModel(cfg, params)
        a1, _ = oracle._layernorm_fwd(x, params["layers.0.ln1_gamma"],
                                      params["layers.0.ln1_beta"], cfg.eps)
        att, _ = oracle._attention_fwd(a1, params["layers.0.w_qkv"],
                                       params["layers.0.b_qkv"],
                                       params["layers.0.w_dense"],
                                       params["layers.0.b_dense"], cfg)
        y1 = x + att
        a2, _ = oracle._layernorm_fwd(y1, params["layers.0.ln2_gamma"],
                                      params["layers.0.ln2_beta"], cfg.eps)
        ref = y1 + dense.gelu(a2 @ params["layers.0.w1"] + params["layers.0.b1"]) \
            @ params["layers.0.w2"] + params["layers.0.b2"]
        assert np.max(np.abs(y - ref)) <= 1e-12

    def test_matches_2d_layer_on_identical_params(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 29)
        lp = {k.split(".", 2)[-1]: v for k, v in params.items()
              if k.startswith("layers.0.")}
        mesh1 = make_mesh(2)
        bl = Baseline1DLayer(mesh1, cfg, lp)
        x = dense.make_rng(30).standard_normal((cfg.b * cfg.s, cfg.h))
        y_base, saved = bl.forward(x, make_ws(mesh1))
        mesh2 = make_mesh(2)
        model = MeshModel(mesh2, cfg, params)
        ws2 = make_ws(mesh2)
        y_2d, _ = model.layers[0].forward(scatter(x, mesh2, ws2, "forward"), ws2)
        assert np.max(np.abs(gather(y_2d) - y_base)) <= 1e-9

    def test_backward_matches_oracle(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 29)
        lp = {k.split(".", 2)[-1]: v for k, v in params.items()
              if k.startswith("layers.0.")}
        mesh = make_mesh(2)
        bl = Baseline1DLayer(mesh, cfg, lp)
        rng = dense.make_rng(31)
        x = rng.standard_normal((cfg.b * cfg.s, cfg.h))
        dy = rng.standard_normal((cfg.b * cfg.s, cfg.h))
        _, saved = bl.forward(x, make_ws(mesh))
        dx, grads = bl.backward(dy, saved, make_ws(mesh))
        # serial layer backward through the oracle's building blocks
        p = params
        a1, ln1 = oracle._layernorm_fwd(x, p["layers.0.ln1_gamma"],
                                        p["layers.0.ln1_beta"], cfg.eps)
        att, actx = oracle._attention_fwd(a1, p["layers.0.w_qkv"], p["layers.0.b_qkv"],
                                          p["layers.0.w_dense"], p["layers.0.b_dense"], cfg)
        y1 = x + att
        a2, ln2 = oracle._layernorm_fwd(y1, p["layers.0.ln2_gamma"],
                                        p["layers.0.ln2_beta"], cfg.eps)
        mid = a2 @ p["layers.0.w1"] + p["layers.0.b1"]
        act = dense.gelu(mid)
        dact = dy @ p["layers.0.w2"].T
        dmid = dense.gelu_backward(mid, dact)
        da2 = dmid @ p["layers.0.w1"].T
        dy1_ln, _, _ = oracle._layernorm_bwd(da2, ln2)
        dy1 = dy + dy1_ln
        da1, dwqkv, dbqkv, dwd, dbd = oracle._attention_bwd(dy1, actx,
                                                            p["layers.0.w_qkv"],
                                                            p["layers.0.w_dense"], cfg)
        dx_ln, _, _ = oracle._layernorm_bwd(da1, ln1)
        assert np.max(np.abs(dx - (dy1 + dx_ln))) <= 1e-9
        assert np.max(np.abs(grads["w_qkv"] - dwqkv)) <= 1e-9
        assert np.max(np.abs(grads["w2"] - act.T @ dy)) <= 1e-9

    def test_heads_divisibility_required(self):
        cfg = ModelConfig(b=2, s=4, h=8, n=2, v=8, num_layers=1)
        params = init_global_params(cfg, 1)
        lp = {k.split(".", 2)[-1]: v for k, v in params.items()
              if k.startswith("layers.0.")}
        with pytest.raises(ConfigError):
            Baseline1DLayer(make_mesh(2), cfg, lp)  # n=2 not divisible by p=4


class TestCheckpointFile:
    def test_roundtrip(self, tmp_path):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=2)
        params = init_global_params(cfg, 41, classifier=True)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, params, classifier=True)
        cfg2, params2, classifier = load_checkpoint(path)
        assert cfg2 == cfg and classifier is True
        for k, v in params.items():
            assert np.array_equal(params2[k], v), k

    def test_binary_layout(self, tmp_path):
        import struct
        cfg = ModelConfig(b=2, s=2, h=4, n=2, v=4, num_layers=0)
        params = init_global_params(cfg, 1)
        path = tmp_path / "tiny.bin"
        save_checkpoint(path, cfg, params)
        raw = path.read_bytes()
        header = struct.unpack("<8Q", raw[:64])
        assert header[2:] == (2, 2, 4, 2, 4, 0)  # b s h n v layers
        assert struct.unpack("<Q", raw[64:72])[0] == 0
        assert struct.unpack("<d", raw[72:80])[0] == cfg.eps
        table = np.frombuffer(raw[80:80 + 4 * 4 * 8], dtype="<f8").reshape(4, 4)
        assert np.array_equal(table, params["table"])
        assert len(raw) == 80 + 4 * 4 * 8

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"\x00" * 128)
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_loaded_model_reproduces_loss(self, tmp_path):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 42)
        tokens, labels = _data(cfg, 42)
        model = MeshModel(make_mesh(2), cfg, params)
        loss1, _, _, _ = run_loss_and_grads(model, tokens, labels)
        path = tmp_path / "m.bin"
        save_checkpoint(path, cfg, params)
        cfg2, params2, _ = load_checkpoint(path)
        model2 = MeshModel(make_mesh(2), cfg2, params2)
        loss2, _, _, _ = run_loss_and_grads(model2, tokens, labels)
        assert loss1 == loss2


class TestModeDeterminism:
    def test_lockstep_bitwise_repeatable(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 5)
        tokens, labels = _data(cfg, 5)

        def run():
            model = MeshModel(make_mesh(2), cfg, params)
            loss, grads, _, _ = run_loss_and_grads(model, tokens, labels)
            return loss, model.gather_grads(grads)

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        for k in g1:
            assert np.array_equal(g1[k], g2[k])

    def test_threaded_matches_lockstep(self):
        cfg = ModelConfig(b=4, s=4, h=16, n=4, v=16, num_layers=1)
        params = init_global_params(cfg, 5)
        tokens, labels = _data(cfg, 5)
        results = {}
        for mode in ("lockstep", "threaded"):
            with sg.create_mesh(sg.MeshConfig(q=2), mode=mode) as mesh:
                model = MeshModel(mesh, cfg, params)
                loss, grads, _, _ = run_loss_and_grads(model, tokens, labels)
                results[mode] = (loss, model.gather_grads(grads),
                                 sg.ledger_report(mesh))
        l_loss, l_grads, l_rep = results["lockstep"]
        t_loss, t_grads, t_rep = results["threaded"]
        assert abs(l_loss - t_loss) <= 1e-9
        for k in l_grads:
            assert np.max(np.abs(l_grads[k] - t_grads[k])) <= 1e-9
        assert l_rep.equals(t_rep)
