"""End-to-end distributed model: embedding -> N layers -> tied lm-head -> loss.

Parameters are generated as whole global matrices from one seeded stream and
then scattered, so the serial reference model and the mesh see bit-identical
values. Canonical ("standard") layout: the fused QKV weight is [Q | K | V]
along its columns; the mesh stores it column-interleaved per device column
(``layers.interleave_qkv``) and gradients are de-interleaved on gather, so
losses and gradients are independent of the mesh size.

Draw order (only weight matrices consume randomness; vectors start at their
identities): embedding table, then per layer w_qkv, w_dense, w1, w2, then
the sequence-classifier head when enabled. All draws are uniform on
[-1/sqrt(h), 1/sqrt(h)).

The optional second loss branch picks each sequence's position-0 hidden
state and projects it to two classes through a head hosted on row 0;
both branch losses are summed.

Checkpoint file layout (little-endian): eight u64 header fields
(magic 0x5347524944434B50, version, b, s, h, n, v, num_layers), one u64
classifier flag, one f64 eps, then the gathered standard-layout parameter
matrices in declaration order as raw f64 row-major bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dense
from .errors import ConfigError, ShapeError
from .layers import (
    LayerGrads,
    LayerParams,
    ModelConfig,
    RowHostedVector,
    TransformerLayer,
    bias_add_forward,
    cross_entropy_backward,
    cross_entropy_forward,
    deinterleave_qkv,
    embedding_backward,
    embedding_forward,
    interleave_qkv,
    lm_head_backward,
    lm_head_logits,
)
from .membuf import (
    BufferPlan,
    CheckpointStore,
    Workspace,
    checkpointed_backward,
    checkpointed_forward,
    clone_to_conjunction,
    plan_buffers,
)
from .mesh import Mesh
from .summa import ShardedMatrix, gather, scatter

_CKPT_MAGIC = 0x5347524944434B50
_CKPT_VERSION = 1

_LAYER_VECTOR_KEYS = ("ln1_gamma", "ln1_beta", "b_qkv", "b_dense",
                      "ln2_gamma", "ln2_beta", "b1", "b2")


def param_declaration_order(cfg: ModelConfig, classifier: bool = False) -> list[str]:
    names = ["table"]
    for i in range(cfg.num_layers):
        names += [f"layers.{i}.{k}" for k in
                  ("ln1_gamma", "ln1_beta", "w_qkv", "b_qkv", "w_dense", "b_dense",
                   "ln2_gamma", "ln2_beta", "w1", "b1", "w2", "b2")]
    if classifier:
        names.append("cls_w")
    return names


def param_shape(cfg: ModelConfig, name: str) -> tuple[int, ...]:
    h = cfg.h
    base = name.rsplit(".", 1)[-1]
    shapes = {
        "table": (cfg.v, h),
        "ln1_gamma": (h,), "ln1_beta": (h,), "ln2_gamma": (h,), "ln2_beta": (h,),
        "w_qkv": (h, 3 * h), "b_qkv": (3 * h,),
        "w_dense": (h, h), "b_dense": (h,),
        "w1": (h, 4 * h), "b1": (4 * h,),
        "w2": (4 * h, h), "b2": (h,),
        "cls_w": (h, 2),
    }
    return shapes[base]


def init_global_params(cfg: ModelConfig, seed: int, classifier: bool = False) -> dict[str, np.ndarray]:
    """Standard-layout global parameters; identical for every mesh size."""
    rng = dense.make_rng(seed)
    scale = 1.0 / math.sqrt(cfg.h)
    params: dict[str, np.ndarray] = {}
    params["table"] = dense.uniform_init(rng, cfg.v, cfg.h, scale)
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        params[pre + "ln1_gamma"] = np.ones(cfg.h)
        params[pre + "ln1_beta"] = np.zeros(cfg.h)
        params[pre + "w_qkv"] = dense.uniform_init(rng, cfg.h, 3 * cfg.h, scale)
        params[pre + "b_qkv"] = np.zeros(3 * cfg.h)
        params[pre + "w_dense"] = dense.uniform_init(rng, cfg.h, cfg.h, scale)
        params[pre + "b_dense"] = np.zeros(cfg.h)
        params[pre + "ln2_gamma"] = np.ones(cfg.h)
        params[pre + "ln2_beta"] = np.zeros(cfg.h)
        params[pre + "w1"] = dense.uniform_init(rng, cfg.h, 4 * cfg.h, scale)
        params[pre + "b1"] = np.zeros(4 * cfg.h)
        params[pre + "w2"] = dense.uniform_init(rng, 4 * cfg.h, cfg.h, scale)
        params[pre + "b2"] = np.zeros(cfg.h)
    if classifier:
        params["cls_w"] = dense.uniform_init(rng, cfg.h, 2, scale)
    return params


@dataclass
class ClsHead:
    """Binary-classification head hosted by row-0 devices, one [h/q, 2] shard
    per column."""

    shards: list[np.ndarray]

    def gathered(self) -> np.ndarray:
        return np.concatenate(self.shards, axis=0)


@dataclass
class ModelGrads:
    table: ShardedMatrix
    layers: list[Optional[LayerGrads]]
    cls_w: Optional[list[np.ndarray]] = None


@dataclass
class ModelSaved:
    tokens: np.ndarray
    labels: np.ndarray
    x_final: ShardedMatrix
    ce_ctx: object
    layer_saves: Optional[list] = None          # non-checkpointed path only
    store: Optional[CheckpointStore] = None
    cls_ctx: Optional[object] = None
    cls_labels: Optional[np.ndarray] = None


class MeshModel:
    """Distributed transformer bound to one mesh."""

    def __init__(self, mesh: Mesh, cfg: ModelConfig, global_params: dict[str, np.ndarray],
                 classifier: bool = False, skip_dead_recompute: bool = False) -> None:
        cfg.validate_mesh(mesh.q)
        self.mesh = mesh
        self.cfg = cfg
        self.classifier = classifier
        q = mesh.q
        v_pad = cfg.v_padded(q)
        table_global = global_params["table"]
        if v_pad != cfg.v:
            table_global = np.vstack([table_global, np.zeros((v_pad - cfg.v, cfg.h))])
        self.table = scatter(table_global, mesh)
        self.layers: list[TransformerLayer] = []
        for i in range(cfg.num_layers):
            pre = f"layers.{i}."
            params = LayerParams(
                w_qkv=scatter(interleave_qkv(global_params[pre + "w_qkv"], q), mesh),
                b_qkv=RowHostedVector.split(interleave_qkv(global_params[pre + "b_qkv"], q), q),
                w_dense=scatter(global_params[pre + "w_dense"], mesh),
                b_dense=RowHostedVector.split(global_params[pre + "b_dense"], q),
                w1=scatter(global_params[pre + "w1"], mesh),
                b1=RowHostedVector.split(global_params[pre + "b1"], q),
                w2=scatter(global_params[pre + "w2"], mesh),
                b2=RowHostedVector.split(global_params[pre + "b2"], q),
                ln1_gamma=RowHostedVector.split(global_params[pre + "ln1_gamma"], q),
                ln1_beta=RowHostedVector.split(global_params[pre + "ln1_beta"], q),
                ln2_gamma=RowHostedVector.split(global_params[pre + "ln2_gamma"], q),
                ln2_beta=RowHostedVector.split(global_params[pre + "ln2_beta"], q),
            )
            self.layers.append(TransformerLayer(mesh, cfg, params,
                                                skip_dead_recompute=skip_dead_recompute))
        self.cls_head: Optional[ClsHead] = None
        if classifier:
            w = global_params["cls_w"]
            hb = cfg.h // q
            self.cls_head = ClsHead([np.array(w[j * hb:(j + 1) * hb, :]) for j in range(q)])

    # -- workspace sizing ---------------------------------------------------

    def buffer_plan(self) -> BufferPlan:
        return plan_buffers(self.cfg, self.mesh.cfg)

    def workspace_capacities(self, checkpointing: bool = True,
                             eager_update: bool = False) -> dict[str, int | None]:
        cfg, q = self.cfg, self.mesh.q
        plan = self.buffer_plan()
        n = max(cfg.num_layers, 1)
        bs_loc = cfg.b * cfg.s // q
        vb = cfg.v_padded(q) // q
        hb = cfg.h // q
        head_stage = vb * hb + bs_loc * vb    # lm-head ABT/AB staging per step
        bsh_p = bs_loc * hb
        return {
            "workspace": max(plan.workspace_scalars, head_stage),
            "forward": plan.forward_scalars if checkpointing
            else cfg.num_layers * plan.forward_scalars + bsh_p,
            "backward": plan.backward_scalars,
            "param_grad": (1 if eager_update else n) * plan.param_grad_scalars,
            "param_grad_tied": 2 * vb * hb,
            "conjunction": plan.conjunction_scalars,
            "free": None,
            "replicated": None,
        }

    def make_workspace(self, checkpointing: bool = True, eager_update: bool = False,
                       merge_fwd_bwd: bool = False, planned: bool = True) -> Workspace:
        caps = self.workspace_capacities(checkpointing, eager_update) if planned else None
        return Workspace(self.mesh.p, capacities=caps, merge_fwd_bwd=merge_fwd_bwd)

    def params_scalars(self) -> np.ndarray:
        """Static per-device parameter residency (the 'params' report category)."""
        cfg, q, p = self.cfg, self.mesh.q, self.mesh.p
        out = np.zeros(p, dtype=np.int64)
        out += cfg.v_padded(q) * cfg.h // p
        out += cfg.num_layers * (12 * cfg.h * cfg.h // p)
        for j in range(q):  # row-0 devices host the vector shards
            out[j] += cfg.num_layers * 13 * (cfg.h // q)
            if self.cls_head is not None:
                out[j] += (cfg.h // q) * 2
        return out

    # -- classifier branch ---------------------------------------------------

    def _cls_forward(self, x_final: ShardedMatrix, cls_labels: np.ndarray, ws: Workspace):
        mesh, cfg = self.mesh, self.cfg
        q = mesh.q
        b_loc = cfg.b // q
        copies: list[np.ndarray | None] = [None] * mesh.p
        for j in range(q):
            for i, arr in enumerate(mesh.broadcast_col(j, 0, self.cls_head.shards[j],
                                                       tag="classifier", ws=ws,
                                                       category="free")):
                copies[mesh.flat(i, j)] = arr
        x0 = [x_final.blocks[dev][::cfg.s, :] for dev in range(mesh.p)]
        partial = []
        for dev in range(mesh.p):
            partial.append(mesh.local_matmul(dev, x0[dev], copies[dev]))
        logits: list[np.ndarray | None] = [None] * mesh.p
        for i in range(q):
            for j, arr in enumerate(mesh.all_reduce_row(
                    i, [partial[mesh.flat(i, j)] for j in range(q)], tag="classifier")):
                logits[mesh.flat(i, j)] = arr
        probs = [dense.softmax_rows(lg) for lg in logits]
        lab = [cls_labels[i * b_loc:(i + 1) * b_loc] for i in range(q)]
        partial_loss = []
        for dev in range(mesh.p):
            row = dev // q
            m = np.max(logits[dev], axis=1)
            lse = m + np.log(np.exp(logits[dev] - m[:, None]).sum(axis=1))
            partial_loss.append(np.array([(lse - logits[dev][np.arange(b_loc), lab[row]]).sum()]))
        total = None
        for j in range(q):
            copies_l = mesh.all_reduce_col(j, [partial_loss[mesh.flat(i, j)] for i in range(q)],
                                           tag="classifier")
            if j == 0:
                total = float(copies_l[0][0])
        ctx = {"probs": probs, "labels": lab, "x0": x0, "w": copies}
        return total / cfg.b, ctx

    def _cls_backward(self, ctx, dx_final: ShardedMatrix, ws: Workspace,
                      upstream: float = 1.0) -> list[np.ndarray]:
        mesh, cfg = self.mesh, self.cfg
        q = mesh.q
        b_loc = cfg.b // q
        scale = upstream / cfg.b
        dw_partial = []
        for dev in range(mesh.p):
            row = dev // q
            dlog = ctx["probs"][dev] * scale
            dlog[np.arange(b_loc), ctx["labels"][row]] -= scale
            dw_partial.append(mesh.local_matmul(dev, ctx["x0"][dev].T, dlog))
            dx0 = mesh.local_matmul(dev, dlog, ctx["w"][dev].T)
            dx_final.blocks[dev][::cfg.s, :] += dx0
        shards = []
        for j in range(q):
            shards.append(mesh.reduce_col(j, 0, [dw_partial[mesh.flat(i, j)]
                                                 for i in range(q)], tag="classifier"))
        return shards

    # -- forward / backward --------------------------------------------------

    def forward(self, tokens: np.ndarray, labels: np.ndarray, ws: Workspace,
                store: CheckpointStore | None = None,
                cls_labels: np.ndarray | None = None) -> tuple[float, ModelSaved]:
        """Full forward; with ``store`` the layer chain runs checkpointed."""
        cfg = self.cfg
        if tokens.shape != (cfg.b, cfg.s):
            raise ShapeError(f"tokens must be [{cfg.b}, {cfg.s}], got {tokens.shape}")
        if self.classifier and cls_labels is None:
            raise ConfigError("classifier enabled but cls_labels missing")
        ws.reset_all("forward")
        ws.reset_all("free")
        x = embedding_forward(tokens, self.table, cfg, ws, out_category="forward")
        layer_saves = None
        if store is not None:
            x = checkpointed_forward(self.layers, x, store, ws)
        else:
            layer_saves = []
            for layer in self.layers:
                x, saved = layer.forward(x, ws)
                layer_saves.append(saved)
        logits = lm_head_logits(x, self.table, ws)
        loss, ce_ctx = cross_entropy_forward(logits, labels, cfg, ws)
        cls_ctx = None
        if self.classifier:
            cls_loss, cls_ctx = self._cls_forward(x, cls_labels, ws)
            loss = loss + cls_loss
        return loss, ModelSaved(tokens=tokens, labels=labels, x_final=x, ce_ctx=ce_ctx,
                                layer_saves=layer_saves, store=store,
                                cls_ctx=cls_ctx, cls_labels=cls_labels)

    def backward(self, saved: ModelSaved, ws: Workspace, upstream: float = 1.0,
                 eager_update: bool = False, lr: float = 0.0) -> ModelGrads:
        cfg, mesh = self.cfg, self.mesh
        dlogit_blocks = cross_entropy_backward(saved.ce_ctx, mesh, ws, upstream)
        v_pad = cfg.v_padded(mesh.q)
        dlogits = ShardedMatrix(mesh, cfg.b * cfg.s, v_pad, dlogit_blocks)
        dx, table_grad = lm_head_backward(dlogits, saved.x_final, self.table, ws,
                                          x_out_category="conjunction",
                                          w_out_category="param_grad_tied")
        cls_w_grad = None
        if self.classifier:
            cls_w_grad = self._cls_backward(saved.cls_ctx, dx, ws, upstream)
        if saved.store is not None:
            dx0, layer_grads = checkpointed_backward(self.layers, dx, saved.store, ws,
                                                     eager_update=eager_update, lr=lr)
        else:
            layer_grads = [None] * len(self.layers)
            dy = dx
            for li in reversed(range(len(self.layers))):
                ws.reset_all("backward")
                dxi, g = self.layers[li].backward(dy, saved.layer_saves[li], ws)
                dy = clone_to_conjunction(dxi, ws)
                layer_grads[li] = g
            dx0 = dy
        emb_grad = embedding_backward(dx0, saved.tokens, self.table, cfg, ws,
                                      out_category="param_grad_tied")
        mesh.each(lambda dev: np.add(table_grad.blocks[dev], emb_grad.blocks[dev],
                                     out=table_grad.blocks[dev]))
        return ModelGrads(table=table_grad, layers=layer_grads, cls_w=cls_w_grad)

    def apply_sgd(self, grads: ModelGrads, lr: float) -> None:
        for dev in range(self.mesh.p):
            self.table.blocks[dev] -= lr * grads.table.blocks[dev]
        for layer, g in zip(self.layers, grads.layers):
            if g is not None:
                layer.apply_sgd(g, lr)
        if self.cls_head is not None and grads.cls_w is not None:
            for j in range(self.mesh.q):
                self.cls_head.shards[j] -= lr * grads.cls_w[j]

    # -- gathering for comparison against the serial model -------------------

    def gather_params(self) -> dict[str, np.ndarray]:
        q, cfg = self.mesh.q, self.cfg
        out = {"table": gather(self.table)[:cfg.v]}
        for i, layer in enumerate(self.layers):
            pre = f"layers.{i}."
            p = layer.params
            out[pre + "w_qkv"] = deinterleave_qkv(gather(p.w_qkv), q)
            out[pre + "b_qkv"] = deinterleave_qkv(p.b_qkv.gathered(), q)
            out[pre + "w_dense"] = gather(p.w_dense)
            out[pre + "b_dense"] = p.b_dense.gathered()
            out[pre + "w1"] = gather(p.w1)
            out[pre + "b1"] = p.b1.gathered()
            out[pre + "w2"] = gather(p.w2)
            out[pre + "b2"] = p.b2.gathered()
            out[pre + "ln1_gamma"] = p.ln1_gamma.gathered()
            out[pre + "ln1_beta"] = p.ln1_beta.gathered()
            out[pre + "ln2_gamma"] = p.ln2_gamma.gathered()
            out[pre + "ln2_beta"] = p.ln2_beta.gathered()
        if self.cls_head is not None:
            out["cls_w"] = self.cls_head.gathered()
        return out

    def gather_grads(self, grads: ModelGrads) -> dict[str, np.ndarray]:
        q, cfg = self.mesh.q, self.cfg
        out = {"table": gather(grads.table)[:cfg.v]}
        for i, g in enumerate(grads.layers):
            if g is None:
                continue
            pre = f"layers.{i}."
            out[pre + "w_qkv"] = deinterleave_qkv(gather(g.w_qkv), q)
            out[pre + "b_qkv"] = deinterleave_qkv(g.b_qkv.gathered(), q)
            out[pre + "w_dense"] = gather(g.w_dense)
            out[pre + "b_dense"] = g.b_dense.gathered()
            out[pre + "w1"] = gather(g.w1)
            out[pre + "b1"] = g.b1.gathered()
            out[pre + "w2"] = gather(g.w2)
            out[pre + "b2"] = g.b2.gathered()
            out[pre + "ln1_gamma"] = g.ln1_gamma.gathered()
            out[pre + "ln1_beta"] = g.ln1_beta.gathered()
            out[pre + "ln2_gamma"] = g.ln2_gamma.gathered()
            out[pre + "ln2_beta"] = g.ln2_beta.gathered()
        if grads.cls_w is not None:
            out["cls_w"] = np.concatenate(grads.cls_w, axis=0)
        return out


def run_loss_and_grads(model: MeshModel, tokens: np.ndarray, labels: np.ndarray,
                       checkpointing: bool = True, cls_labels: np.ndarray | None = None,
                       merge_fwd_bwd: bool = False, planned: bool = True,
                       eager_update: bool = False, lr: float = 0.0):
    """One forward+backward pass; returns (loss, grads, workspace, store)."""
    ws = model.make_workspace(checkpointing=checkpointing, eager_update=eager_update,
                              merge_fwd_bwd=merge_fwd_bwd, planned=planned)
    store = CheckpointStore(model.mesh.p) if checkpointing else None
    loss, saved = model.forward(tokens, labels, ws, store=store, cls_labels=cls_labels)
    grads = model.backward(saved, ws, eager_update=eager_update, lr=lr)
    return loss, grads, ws, store


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, global_params: dict[str, np.ndarray],
                    classifier: bool = False) -> None:
    """Write the documented binary layout (see module docstring)."""
    with open(path, "wb") as f:
        f.write(struct.pack("<8Q", _CKPT_MAGIC, _CKPT_VERSION, cfg.b, cfg.s, cfg.h,
                            cfg.n, cfg.v, cfg.num_layers))
        f.write(struct.pack("<Q", 1 if classifier else 0))
        f.write(struct.pack("<d", cfg.eps))
        for name in param_declaration_order(cfg, classifier):
            arr = np.ascontiguousarray(global_params[name], dtype="<f8")
            if arr.shape != param_shape(cfg, name):
                raise ShapeError(f"{name}: expected {param_shape(cfg, name)}, got {arr.shape}")
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], bool]:
    with open(path, "rb") as f:
        magic, version, b, s, h, n, v, num_layers = struct.unpack("<8Q", f.read(64))
        if magic != _CKPT_MAGIC:
            raise ConfigError(f"not a model checkpoint (bad magic {magic:#x})")
        if version != _CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        classifier = bool(struct.unpack("<Q", f.read(8))[0])
        eps = struct.unpack("<d", f.read(8))[0]
        cfg = ModelConfig(b=b, s=s, h=h, n=n, v=v, num_layers=num_layers, eps=eps)
        params = {}
        for name in param_declaration_order(cfg, classifier):
            shape = param_shape(cfg, name)
            count = int(np.prod(shape))
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = np.array(data)
    return cfg, params, classifier
