"""1D tensor-parallel transformer layer (column/row weight splits).

Comparison baseline: every device holds the whole [b*s, h] activations and a
1/p column slice of the first weight of each sub-layer (whole heads for
attention) plus a 1/p row slice of the second; partial outputs are summed by
a ring all-reduce over all p devices. Forward therefore costs exactly two
all-reduces of b*s*h scalars per layer; backward with checkpoint recompute
costs four (two to rebuild the forward, two for the input gradients) for a
2x forward ratio. Layer norms run replicated on every device with no
communication.

Numerics match the 2D layer and the serial model on identical gathered
parameters; only the partition and the traffic pattern differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dense
from .errors import ConfigError
from .layers import ModelConfig, interleave_qkv, deinterleave_qkv
from .membuf import Workspace
from .mesh import Mesh


@dataclass
class _DeviceShards:
    w_qkv: np.ndarray     # [h, 3h/p], this device's heads' Q|K|V columns
    b_qkv: np.ndarray     # [3h/p]
    w_dense: np.ndarray   # [h/p, h]
    w1: np.ndarray        # [h, 4h/p]
    b1: np.ndarray        # [4h/p]
    w2: np.ndarray        # [4h/p, h]


class Baseline1DLayer:
    """One transformer layer in the 1D partition, simulated on the mesh."""

    def __init__(self, mesh: Mesh, cfg: ModelConfig, layer_params: dict[str, np.ndarray]) -> None:
        p = mesh.p
        if cfg.n % p:
            raise ConfigError(f"1D partition needs heads n={cfg.n} divisible by p={p}")
        if cfg.h % p:
            raise ConfigError(f"1D partition needs hidden h={cfg.h} divisible by p={p}")
        self.mesh = mesh
        self.cfg = cfg
        h, hp = cfg.h, cfg.h // p
        w_qkv_il = interleave_qkv(layer_params["w_qkv"], p)
        b_qkv_il = interleave_qkv(layer_params["b_qkv"], p)
        self.shards = [
            _DeviceShards(
                w_qkv=np.array(w_qkv_il[:, d * 3 * hp:(d + 1) * 3 * hp]),
                b_qkv=np.array(b_qkv_il[d * 3 * hp:(d + 1) * 3 * hp]),
                w_dense=np.array(layer_params["w_dense"][d * hp:(d + 1) * hp, :]),
                w1=np.array(layer_params["w1"][:, d * 4 * hp:(d + 1) * 4 * hp]),
                b1=np.array(layer_params["b1"][d * 4 * hp:(d + 1) * 4 * hp]),
                w2=np.array(layer_params["w2"][d * 4 * hp:(d + 1) * 4 * hp, :]),
            )
            for d in range(p)
        ]
        # replicated parameters (added after the all-reduce / no comm at all)
        self.b_dense = np.array(layer_params["b_dense"])
        self.b2 = np.array(layer_params["b2"])
        self.ln1_gamma = np.array(layer_params["ln1_gamma"])
        self.ln1_beta = np.array(layer_params["ln1_beta"])
        self.ln2_gamma = np.array(layer_params["ln2_gamma"])
        self.ln2_beta = np.array(layer_params["ln2_beta"])

    def _ln(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
        h = self.cfg.h
        mu = x.sum(axis=1) / h
        var = (x * x).sum(axis=1) / h - mu * mu
        rstd = 1.0 / np.sqrt(var + self.cfg.eps)
        x_hat = (x - mu[:, None]) * rstd[:, None]
        return x_hat * gamma + beta, {"x_hat": x_hat, "rstd": rstd, "gamma": gamma}

    @staticmethod
    def _ln_bwd(dout: np.ndarray, ctx: dict) -> np.ndarray:
        h = dout.shape[1]
        g = dout * ctx["gamma"]
        sum_xg = (ctx["x_hat"] * g).sum(axis=1) / h
        sum_g = g.sum(axis=1) / h
        return ctx["rstd"][:, None] * (g - sum_g[:, None] - ctx["x_hat"] * sum_xg[:, None])

    def forward(self, x: np.ndarray, ws: Workspace) -> tuple[np.ndarray, dict]:
        """x is the replicated [b*s, h] input; returns the replicated output.

        Per-device compute is identical across devices except for the owned
        shard, so local state is computed once per device and kept in the
        saved context. Whole-activation residents (the input copy, the
        attention output, the layer output) are charged to the "replicated"
        arena, 3*b*s*h scalars per device per layer.
        """
        mesh, cfg = self.mesh, self.cfg
        p = mesh.p
        n_loc, d = cfg.n // p, cfg.head_dim
        bs = cfg.b * cfg.s
        scale = 1.0 / math.sqrt(d)
        saved: dict = {"x": x, "dev": [None] * p}
        for dev in range(p):
            xc = ws.alloc(dev, (bs, cfg.h), "replicated")
            np.copyto(xc, x)
        a1, ln1 = self._ln(x, self.ln1_gamma, self.ln1_beta)
        saved["ln1"] = ln1
        att_partial: list[np.ndarray] = [None] * p  # type: ignore[list-item]

        def attn_local(dev: int) -> None:
            sh = self.shards[dev]
            qkv = mesh.local_matmul(dev, a1, sh.w_qkv) + sh.b_qkv
            hp = qkv.shape[1] // 3
            qh = qkv[:, :hp].reshape(cfg.b, cfg.s, n_loc, d).transpose(0, 2, 1, 3)
            kh = qkv[:, hp:2 * hp].reshape(cfg.b, cfg.s, n_loc, d).transpose(0, 2, 1, 3)
            vh = qkv[:, 2 * hp:].reshape(cfg.b, cfg.s, n_loc, d).transpose(0, 2, 1, 3)
            scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
            probs = dense.softmax_rows(scores)
            heads = np.matmul(probs, vh)
            mesh.add_macs(dev, 2 * cfg.b * n_loc * cfg.s * cfg.s * d)
            ctx_mat = np.ascontiguousarray(heads.transpose(0, 2, 1, 3)).reshape(bs, hp)
            att_partial[dev] = mesh.local_matmul(dev, ctx_mat, sh.w_dense)
            saved["dev"][dev] = {"a1": a1, "q": qh, "k": kh, "v": vh,
                                 "probs": probs, "ctx": ctx_mat}

        mesh.each(attn_local)
        att_sum = mesh.all_reduce_all(att_partial, tag="baseline")
        att_out = [ws.alloc(dev, (bs, cfg.h), "replicated") for dev in range(p)]
        for dev in range(p):
            np.add(att_sum[dev], self.b_dense, out=att_out[dev])
        y1 = x + att_out[0]
        saved["y1"] = y1
        a2, ln2 = self._ln(y1, self.ln2_gamma, self.ln2_beta)
        saved["ln2"] = ln2
        mlp_partial: list[np.ndarray] = [None] * p  # type: ignore[list-item]

        def mlp_local(dev: int) -> None:
            sh = self.shards[dev]
            mid = mesh.local_matmul(dev, a2, sh.w1) + sh.b1
            act = dense.gelu(mid)
            mlp_partial[dev] = mesh.local_matmul(dev, act, sh.w2)
            saved["dev"][dev].update({"a2": a2, "mid": mid, "act": act})

        mesh.each(mlp_local)
        mlp_sum = mesh.all_reduce_all(mlp_partial, tag="baseline")
        out_blocks = [ws.alloc(dev, (bs, cfg.h), "replicated") for dev in range(p)]
        for dev in range(p):
            np.copyto(out_blocks[dev], y1 + mlp_sum[dev] + self.b2)
        return out_blocks[0], saved

    def backward(self, dy: np.ndarray, saved: dict, ws: Workspace) -> tuple[np.ndarray, dict]:
        """Input gradient plus standard-layout parameter grads (gathered)."""
        mesh, cfg = self.mesh, self.cfg
        p = mesh.p
        bs = cfg.b * cfg.s
        scale = 1.0 / math.sqrt(cfg.head_dim)
        da2_partial: list[np.ndarray] = [None] * p  # type: ignore[list-item]
        dw1 = [None] * p
        db1 = [None] * p
        dw2 = [None] * p

        def mlp_bwd(dev: int) -> None:
            sh = self.shards[dev]
            ctx = saved["dev"][dev]
            dw2[dev] = mesh.local_matmul(dev, ctx["act"].T, dy)
            dact = mesh.local_matmul(dev, dy, sh.w2.T)
            dmid = dense.gelu_backward(ctx["mid"], dact)
            db1[dev] = dmid.sum(axis=0)
            dw1[dev] = mesh.local_matmul(dev, ctx["a2"].T, dmid)
            da2_partial[dev] = mesh.local_matmul(dev, dmid, sh.w1.T)

        mesh.each(mlp_bwd)
        da2 = mesh.all_reduce_all(da2_partial, tag="baseline")[0]
        dy1 = dy + self._ln_bwd(da2, saved["ln2"])
        da1_partial: list[np.ndarray] = [None] * p  # type: ignore[list-item]
        dwqkv = [None] * p
        dbqkv = [None] * p
        dwd = [None] * p

        def attn_bwd(dev: int) -> None:
            sh = self.shards[dev]
            ctx = saved["dev"][dev]
            n_loc, d = cfg.n // p, cfg.head_dim
            dwd[dev] = mesh.local_matmul(dev, ctx["ctx"].T, dy1)
            dctx = mesh.local_matmul(dev, dy1, sh.w_dense.T)
            dheads = dctx.reshape(cfg.b, cfg.s, n_loc, d).transpose(0, 2, 1, 3)
            dp = np.matmul(dheads, ctx["v"].transpose(0, 1, 3, 2))
            dv = np.matmul(ctx["probs"].transpose(0, 1, 3, 2), dheads)
            ds = ctx["probs"] * (dp - np.sum(dp * ctx["probs"], axis=-1, keepdims=True))
            ds *= scale
            dq = np.matmul(ds, ctx["k"])
            dk = np.matmul(ds.transpose(0, 1, 3, 2), ctx["q"])
            mesh.add_macs(dev, 4 * cfg.b * n_loc * cfg.s * cfg.s * d)
            merge = lambda t: np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(bs, -1)
            dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=1)
            dbqkv[dev] = dqkv.sum(axis=0)
            dwqkv[dev] = mesh.local_matmul(dev, ctx["a1"].T, dqkv)
            da1_partial[dev] = mesh.local_matmul(dev, dqkv, sh.w_qkv.T)

        mesh.each(attn_bwd)
        da1 = mesh.all_reduce_all(da1_partial, tag="baseline")[0]
        dx = dy1 + self._ln_bwd(da1, saved["ln1"])
        g1, b1v = self._ln_grads(da1, saved["ln1"])
        g2, b2v = self._ln_grads(da2, saved["ln2"])
        grads = {
            "w_qkv": deinterleave_qkv(np.concatenate(dwqkv, axis=1), p),
            "b_qkv": deinterleave_qkv(np.concatenate(dbqkv), p),
            "w_dense": np.concatenate(dwd, axis=0),
            "b_dense": dy1.sum(axis=0),
            "w1": np.concatenate(dw1, axis=1),
            "b1": np.concatenate(db1),
            "w2": np.concatenate(dw2, axis=0),
            "b2": dy.sum(axis=0),
            "ln1_gamma": g1,
            "ln1_beta": b1v,
            "ln2_gamma": g2,
            "ln2_beta": b2v,
        }
        return dx, grads

    @staticmethod
    def _ln_grads(dout: np.ndarray, ctx: dict) -> tuple[np.ndarray, np.ndarray]:
        return (dout * ctx["x_hat"]).sum(axis=0), dout.sum(axis=0)
