"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

import summagrid as sg
from summagrid import dense
from summagrid.membuf import CheckpointStore, Workspace, checkpointed_backward, checkpointed_forward
from summagrid.model import MeshModel, init_global_params
from summagrid.summa import scatter


def make_mesh(q: int, **kw) -> sg.Mesh:
    cost = sg.CostParams(beta=kw.pop("beta", 1.0))
    return sg.create_mesh(sg.MeshConfig(q=q, **kw), cost=cost)


def make_ws(mesh: sg.Mesh, **kw) -> Workspace:
    return Workspace(mesh.p, **kw)


def triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent brute-force product oracle (never uses the library path)."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def layer_cfg(q: int = 2, b: int = 4, s: int = 4, h: int = 16, n: int = 4,
              v: int = 16, num_layers: int = 1) -> sg.ModelConfig:
    return sg.ModelConfig(b=b, s=s, h=h, n=n, v=v, num_layers=num_layers)


def build_layer(q: int, cfg: sg.ModelConfig, seed: int = 3, **mesh_kw):
    """(mesh, model, layer0) with freshly scattered parameters."""
    mesh = make_mesh(q, **mesh_kw)
    params = init_global_params(cfg, seed)
    model = MeshModel(mesh, cfg, params)
    return mesh, model, model.layers[0], params


def run_layer_fwd_bwd(mesh, layer, cfg, seed: int = 5):
    """One isolated layer: checkpointed forward then backward; returns the
    (before, after-forward, after-backward) ledger snapshots and workspace."""
    ws = Workspace(mesh.p)
    rng = dense.make_rng(seed)
    x = scatter(rng.standard_normal((cfg.b * cfg.s, cfg.h)), mesh, ws, "forward")
    store = CheckpointStore(mesh.p)
    r0 = sg.ledger_report(mesh)
    checkpointed_forward([layer], x, store, ws)
    r1 = sg.ledger_report(mesh)
    dy = scatter(rng.standard_normal((cfg.b * cfg.s, cfg.h)), mesh, ws, "conjunction")
    checkpointed_backward([layer], dy, store, ws)
    r2 = sg.ledger_report(mesh)
    return r0, r1, r2, ws
