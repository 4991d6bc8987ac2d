"""Distributed transformer building blocks on the 2D mesh.

Partitioning scheme: activations [b, s, h] are sharded with the batch
dimension split across device rows and the hidden dimension across device
columns; a whole sequence (the s axis) always stays on one device. For
SUMMA calls a hidden-state shard is handled as its flattened matrix form
[b*s/q, h/q]. Parameter matrices are split q x q; bias and layer-norm
vectors are hosted by the devices in row 0 (one h/q shard per column),
broadcast down columns in forward and reduced back to row 0 in backward.

Attention keeps whole heads local: the fused QKV projection's columns are
laid out so that column block j holds [Q_j | K_j | V_j] for exactly the
n/q heads owned by device column j (see ``interleave_qkv``), which lets
softmax(Q K^T) V run without any communication between the two SUMMA
products of the sub-layer.

Collective charges carry tags ("summa", "bias", "layernorm", "embedding",
"lmhead", "loss") so ledger checks can isolate the SUMMA share of a layer's
traffic from the vector housekeeping, which the cost table treats as
negligible but is still charged here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dense
from .errors import ConfigError, ShapeError
from .mesh import Mesh
from .membuf import Workspace
from .summa import (
    ShardedMatrix,
    scatter,
    summa_ab,
    summa_ab_backward,
    summa_abt,
    summa_abt_backward,
)


@dataclass(frozen=True)
class ModelConfig:
    """Global transformer dimensions; all sharding derives from these."""

    b: int          # batch size
    s: int          # sequence length
    h: int          # hidden size
    n: int          # attention heads
    v: int          # vocabulary size
    num_layers: int
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if min(self.b, self.s, self.h, self.n, self.v) < 1 or self.num_layers < 0:
            raise ConfigError("model dimensions must be positive (num_layers >= 0)")
        if self.h % self.n:
            raise ConfigError(f"hidden size {self.h} not divisible by heads {self.n}")
        if self.eps <= 0:
            raise ConfigError("layer-norm eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.h // self.n

    def validate_mesh(self, q: int) -> None:
        """Divisibility the 2D partition needs (vocabulary is padded, not checked)."""
        for name, val in (("batch size b", self.b), ("hidden size h", self.h),
                          ("attention heads n", self.n)):
            if val % q:
                raise ConfigError(f"{name} = {val} not divisible by mesh side q = {q}")
        if (self.h // q) % self.head_dim:
            raise ConfigError(
                f"column shard h/q = {self.h // q} does not hold whole heads of "
                f"size h/n = {self.head_dim}"
            )

    def v_padded(self, q: int) -> int:
        """Vocabulary rounded up to a multiple of q; extra rows are never
        valid labels and their logits are masked out of the softmax."""
        return ((self.v + q - 1) // q) * q


def interleave_qkv(w: np.ndarray, parts: int) -> np.ndarray:
    """Reorder fused-projection columns from [Q|K|V] to per-part [Qj|Kj|Vj].

    Works on the [h, 3h] weight (axis 1) or the [3h] bias (axis 0). With the
    reordered layout, splitting into ``parts`` column blocks gives each part
    its own heads' query, key and value columns contiguously.
    """
    three_h = w.shape[-1]
    h = three_h // 3
    hp = h // parts
    pieces = []
    for j in range(parts):
        for comp in range(3):
            lo = comp * h + j * hp
            pieces.append(w[..., lo:lo + hp])
    return np.concatenate(pieces, axis=-1)


def deinterleave_qkv(w: np.ndarray, parts: int) -> np.ndarray:
    """Inverse of interleave_qkv."""
    three_h = w.shape[-1]
    h = three_h // 3
    hp = h // parts
    comps: list[list[np.ndarray]] = [[], [], []]
    for j in range(parts):
        base = j * 3 * hp
        for comp in range(3):
            comps[comp].append(w[..., base + comp * hp: base + (comp + 1) * hp])
    return np.concatenate([np.concatenate(c, axis=-1) for c in comps], axis=-1)


@dataclass
class RowHostedVector:
    """A length-W vector hosted by row-0 devices: shard j (W/q wide) on (0, j)."""

    shards: list[np.ndarray]

    @property
    def width(self) -> int:
        return sum(s.size for s in self.shards)

    def gathered(self) -> np.ndarray:
        return np.concatenate(self.shards)

    @staticmethod
    def split(vec: np.ndarray, q: int) -> "RowHostedVector":
        if vec.size % q:
            raise ShapeError(f"vector of size {vec.size} not divisible by q={q}")
        w = vec.size // q
        return RowHostedVector([np.array(vec[j * w:(j + 1) * w], dtype=np.float64)
                                for j in range(q)])


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def _token_block(tokens: np.ndarray, row: int, q: int) -> np.ndarray:
    """Flattened token ids for device row ``row`` ([b/q, s] -> [b*s/q])."""
    b = tokens.shape[0]
    bb = b // q
    return tokens[row * bb:(row + 1) * bb, :].reshape(-1)


def embedding_forward(tokens: np.ndarray, table: ShardedMatrix, cfg: ModelConfig,
                      ws: Workspace, out_category: str = "free",
                      tag: str = "embedding") -> ShardedMatrix:
    """Look up token embeddings, one vocabulary block per step.

    The lookup is the one-hot matrix product of Algorithm-1 shape: at step l
    the table block (l, j) is broadcast within column j and every device
    copies rows for the tokens whose id falls in vocabulary block l (the
    zero rows of the one-hot operand are skipped, so no MACs are charged).
    """
    mesh = table.mesh
    q = mesh.q
    v_pad = cfg.v_padded(q)
    if np.min(tokens) < 0 or np.max(tokens) >= cfg.v:
        raise ConfigError(f"token ids must lie in [0, {cfg.v})")
    vb = v_pad // q
    hb = cfg.h // q
    bs_loc = (cfg.b // q) * cfg.s
    out = [ws.alloc(dev, (bs_loc, hb), out_category) for dev in range(mesh.p)]
    ids = [_token_block(tokens, i, q) for i in range(q)]
    for l in range(q):
        ws.reset_all("workspace")
        tmp: list[np.ndarray | None] = [None] * mesh.p
        for j in range(q):
            for i, arr in enumerate(mesh.broadcast_col(j, l, table.block(l, j), tag=tag, ws=ws)):
                tmp[mesh.flat(i, j)] = arr

        def gather_rows(dev: int, lo: int = l * vb) -> None:
            row_ids = ids[dev // q]
            mask = (row_ids >= lo) & (row_ids < lo + vb)
            out[dev][mask] = tmp[dev][row_ids[mask] - lo]

        mesh.each(gather_rows)
    return ShardedMatrix(mesh, cfg.b * cfg.s, cfg.h, out)


def embedding_backward(out_grad: ShardedMatrix, tokens: np.ndarray, table: ShardedMatrix,
                       cfg: ModelConfig, ws: Workspace, out_category: str = "free",
                       tag: str = "embedding") -> ShardedMatrix:
    """Scatter-add token gradients into vocabulary rows, reduced within each
    column to the block's owning row. Repeated ids accumulate."""
    mesh = table.mesh
    q = mesh.q
    v_pad = cfg.v_padded(q)
    vb, hb = v_pad // q, cfg.h // q
    out = [ws.alloc(dev, (vb, hb), out_category) for dev in range(mesh.p)]
    ids = [_token_block(tokens, i, q) for i in range(q)]
    for l in range(q):
        ws.reset_all("workspace")
        tmp = [ws.alloc(dev, (vb, hb), "workspace") for dev in range(mesh.p)]

        def scatter_add(dev: int, lo: int = l * vb) -> None:
            row_ids = ids[dev // q]
            mask = (row_ids >= lo) & (row_ids < lo + vb)
            np.add.at(tmp[dev], row_ids[mask] - lo, out_grad.blocks[dev][mask])

        mesh.each(scatter_add)
        for j in range(q):
            summed = mesh.reduce_col(j, l, [tmp[mesh.flat(i, j)] for i in range(q)], tag=tag)
            out[mesh.flat(l, j)] += summed
    return ShardedMatrix(mesh, v_pad, cfg.h, out)


# ---------------------------------------------------------------------------
# bias add
# ---------------------------------------------------------------------------

def bias_add_forward(x: ShardedMatrix, bias: RowHostedVector, ws: Workspace,
                     tag: str = "bias") -> ShardedMatrix:
    """Broadcast each bias shard from row 0 down its column, add in place."""
    mesh = x.mesh
    q = mesh.q
    copies: list[np.ndarray | None] = [None] * mesh.p
    for j in range(q):
        for i, arr in enumerate(mesh.broadcast_col(j, 0, bias.shards[j], tag=tag,
                                                   ws=ws, category="free")):
            copies[mesh.flat(i, j)] = arr
    mesh.each(lambda dev: np.add(x.blocks[dev], copies[dev], out=x.blocks[dev]))
    return x


def bias_add_backward(out_grad: ShardedMatrix, ws: Workspace,
                      tag: str = "bias") -> tuple[ShardedMatrix, RowHostedVector]:
    """x grad passes through; bias grad is the position sum reduced to row 0,
    which hosts it in its parameter-gradient arena."""
    mesh = out_grad.mesh
    q = mesh.q
    partial = [blk.sum(axis=0) for blk in out_grad.blocks]
    shards = []
    for j in range(q):
        summed = mesh.reduce_col(j, 0, [partial[mesh.flat(i, j)] for i in range(q)],
                                 tag=tag)
        dst = ws.alloc(mesh.flat(0, j), summed.shape, "param_grad")
        np.copyto(dst, summed)
        shards.append(dst)
    return out_grad, RowHostedVector(shards)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

@dataclass
class LayerNormContext:
    x_hat: list[np.ndarray]      # normalized activations, per device
    rstd: list[np.ndarray]       # 1/sqrt(Var[X]+eps) per (b, s) position
    mean: list[np.ndarray]       # E[X] per position
    gamma: list[np.ndarray]      # broadcast copy of the scale vector shard


def layernorm_forward(x: ShardedMatrix, gamma: RowHostedVector, beta_param: RowHostedVector,
                      cfg: ModelConfig, ws: Workspace, out_category: str = "free",
                      tag: str = "layernorm") -> tuple[ShardedMatrix, LayerNormContext]:
    """Normalize over the full hidden dimension (one row all-reduce).

    Per position, local sums of X and X^2 are packed into two scalars and
    all-reduced along the device row; X_hat = (X - E[X]) * rstd is formed
    locally and the affine scale/shift arrives by column broadcast from
    row 0.
    """
    mesh = x.mesh
    q = mesh.q
    h = cfg.h
    packed = [np.stack([blk.sum(axis=1), (blk * blk).sum(axis=1)], axis=1)
              for blk in x.blocks]
    totals: list[np.ndarray | None] = [None] * mesh.p
    for i in range(q):
        for j, arr in enumerate(mesh.all_reduce_row(i, [packed[mesh.flat(i, j)]
                                                        for j in range(q)], tag=tag)):
            totals[mesh.flat(i, j)] = arr
    g_copies: list[np.ndarray | None] = [None] * mesh.p
    b_copies: list[np.ndarray | None] = [None] * mesh.p
    for j in range(q):
        for i, arr in enumerate(mesh.broadcast_col(j, 0, gamma.shards[j], tag=tag,
                                                   ws=ws, category="free")):
            g_copies[mesh.flat(i, j)] = arr
        for i, arr in enumerate(mesh.broadcast_col(j, 0, beta_param.shards[j], tag=tag,
                                                   ws=ws, category="free")):
            b_copies[mesh.flat(i, j)] = arr
    out = [ws.alloc(dev, blk.shape, out_category) for dev, blk in enumerate(x.blocks)]
    x_hat = [ws.alloc(dev, blk.shape, "free") for dev, blk in enumerate(x.blocks)]
    rstd: list[np.ndarray] = [None] * mesh.p  # type: ignore[list-item]
    mean: list[np.ndarray] = [None] * mesh.p  # type: ignore[list-item]

    def normalize(dev: int) -> None:
        mu = totals[dev][:, 0] / h
        var = totals[dev][:, 1] / h - mu * mu
        r = 1.0 / np.sqrt(var + cfg.eps)
        np.multiply(x.blocks[dev] - mu[:, None], r[:, None], out=x_hat[dev])
        np.multiply(x_hat[dev], g_copies[dev], out=out[dev])
        out[dev] += b_copies[dev]
        rstd[dev] = r
        mean[dev] = mu

    mesh.each(normalize)
    y = ShardedMatrix(mesh, x.global_rows, x.global_cols, out)
    return y, LayerNormContext(x_hat=x_hat, rstd=rstd, mean=mean, gamma=g_copies)


def layernorm_backward(out_grad: ShardedMatrix, ctx: LayerNormContext, cfg: ModelConfig,
                       ws: Workspace, out_category: str = "free",
                       tag: str = "layernorm") -> tuple[ShardedMatrix, RowHostedVector, RowHostedVector]:
    """Input gradient rstd * (g - mean_h(g) - X_hat * mean_h(X_hat*g)) with
    g = out_grad * gamma; the two row-wise sums travel in one packed
    all-reduce, and gamma/beta gradients are reduced to row 0."""
    mesh = out_grad.mesh
    q = mesh.q
    h = cfg.h
    g = [out_grad.blocks[dev] * ctx.gamma[dev] for dev in range(mesh.p)]
    packed = [np.stack([(ctx.x_hat[dev] * g[dev]).sum(axis=1), g[dev].sum(axis=1)], axis=1)
              for dev in range(mesh.p)]
    totals: list[np.ndarray | None] = [None] * mesh.p
    for i in range(q):
        for j, arr in enumerate(mesh.all_reduce_row(i, [packed[mesh.flat(i, j)]
                                                        for j in range(q)], tag=tag)):
            totals[mesh.flat(i, j)] = arr
    dx = [ws.alloc(dev, blk.shape, out_category) for dev, blk in enumerate(out_grad.blocks)]

    def input_grad(dev: int) -> None:
        sum_xg = totals[dev][:, 0] / h
        sum_g = totals[dev][:, 1] / h
        np.multiply(
            ctx.rstd[dev][:, None],
            g[dev] - sum_g[:, None] - ctx.x_hat[dev] * sum_xg[:, None],
            out=dx[dev],
        )

    mesh.each(input_grad)
    # gamma and beta grads: position sums, packed into one column reduce and
    # hosted by row 0 in its parameter-gradient arena
    gb = [np.stack([(out_grad.blocks[dev] * ctx.x_hat[dev]).sum(axis=0),
                    out_grad.blocks[dev].sum(axis=0)], axis=0) for dev in range(mesh.p)]
    g_shards, b_shards = [], []
    for j in range(q):
        summed = mesh.reduce_col(j, 0, [gb[mesh.flat(i, j)] for i in range(q)], tag=tag)
        dst = ws.alloc(mesh.flat(0, j), summed.shape, "param_grad")
        np.copyto(dst, summed)
        g_shards.append(dst[0])
        b_shards.append(dst[1])
    x_grad = ShardedMatrix(mesh, out_grad.global_rows, out_grad.global_cols, dx)
    return x_grad, RowHostedVector(g_shards), RowHostedVector(b_shards)


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionContext:
    x_in: ShardedMatrix
    q_heads: list[np.ndarray]    # [b/q, n/q, s, d] per device
    k_heads: list[np.ndarray]
    v_heads: list[np.ndarray]
    probs: list[np.ndarray]      # softmax(QK^T/sqrt(d)), [b/q, n/q, s, s]
    ctx_mat: ShardedMatrix       # concatenated head outputs, [b*s/q, h/q]


def _split_heads(blk: np.ndarray, b_loc: int, s: int, n_loc: int, d: int) -> np.ndarray:
    """[b*s/q, n_loc*d] -> [b_loc, n_loc, s, d] (copy)."""
    return np.ascontiguousarray(
        blk.reshape(b_loc, s, n_loc, d).transpose(0, 2, 1, 3))


def _merge_heads(heads: np.ndarray, bs_loc: int) -> np.ndarray:
    """[b_loc, n_loc, s, d] -> [b*s/q, n_loc*d] (copy)."""
    b_loc, n_loc, s, d = heads.shape
    return np.ascontiguousarray(heads.transpose(0, 2, 1, 3)).reshape(bs_loc, n_loc * d)


def attention_forward(x: ShardedMatrix, w_qkv: ShardedMatrix, b_qkv: RowHostedVector,
                      w_dense: ShardedMatrix, b_dense: RowHostedVector, cfg: ModelConfig,
                      ws: Workspace) -> tuple[ShardedMatrix, AttentionContext]:
    """Fused QKV product, local multi-head attention, dense product.

    Each device owns n/q whole heads for b/q sequences, so everything
    between the two SUMMA calls is communication-free.
    """
    mesh = x.mesh
    q = mesh.q
    cfg.validate_mesh(q)
    b_loc, n_loc, d = cfg.b // q, cfg.n // q, cfg.head_dim
    bs_loc = b_loc * cfg.s
    scale = 1.0 / math.sqrt(d)
    qkv = summa_ab(x, w_qkv, ws, out_category="forward", tag="summa")
    bias_add_forward(qkv, b_qkv, ws)
    hb = cfg.h // q
    q_heads: list[np.ndarray] = [None] * mesh.p  # type: ignore[list-item]
    k_heads: list[np.ndarray] = [None] * mesh.p  # type: ignore[list-item]
    v_heads: list[np.ndarray] = [None] * mesh.p  # type: ignore[list-item]
    probs: list[np.ndarray] = [None] * mesh.p    # type: ignore[list-item]
    ctx_blocks = [ws.alloc(dev, (bs_loc, hb), "free") for dev in range(mesh.p)]
    mac_per_dev = b_loc * n_loc * cfg.s * cfg.s * d  # one batched s*s*d product

    def local_attention(dev: int) -> None:
        blk = qkv.blocks[dev]
        qh = _split_heads(blk[:, :hb], b_loc, cfg.s, n_loc, d)
        kh = _split_heads(blk[:, hb:2 * hb], b_loc, cfg.s, n_loc, d)
        vh = _split_heads(blk[:, 2 * hb:], b_loc, cfg.s, n_loc, d)
        scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
        p_mat = dense.softmax_rows(scores)
        heads_out = np.matmul(p_mat, vh)
        np.copyto(ctx_blocks[dev], _merge_heads(heads_out, bs_loc))
        q_heads[dev], k_heads[dev], v_heads[dev], probs[dev] = qh, kh, vh, p_mat
        mesh.add_macs(dev, 2 * mac_per_dev)

    mesh.each(local_attention)
    ctx_mat = ShardedMatrix(mesh, cfg.b * cfg.s, cfg.h, ctx_blocks)
    out = summa_ab(ctx_mat, w_dense, ws, out_category="forward", tag="summa")
    bias_add_forward(out, b_dense, ws)
    return out, AttentionContext(x_in=x, q_heads=q_heads, k_heads=k_heads,
                                 v_heads=v_heads, probs=probs, ctx_mat=ctx_mat)


def attention_backward(out_grad: ShardedMatrix, ctx: AttentionContext, w_qkv: ShardedMatrix,
                       w_dense: ShardedMatrix, cfg: ModelConfig, ws: Workspace):
    """Gradients for x, the two weight matrices and the two biases.

    Softmax backward is local per device; the four SUMMA products are the
    two matrix-gradient identities applied to each forward product.
    """
    mesh = out_grad.mesh
    q = mesh.q
    b_loc, n_loc, d = cfg.b // q, cfg.n // q, cfg.head_dim
    bs_loc = b_loc * cfg.s
    hb = cfg.h // q
    scale = 1.0 / math.sqrt(d)
    _, b_dense_grad = bias_add_backward(out_grad, ws)
    dctx, w_dense_grad = summa_ab_backward(out_grad, ctx.ctx_mat, w_dense, ws,
                                           a_out_category="backward",
                                           b_out_category="param_grad")
    dqkv_blocks = [ws.alloc(dev, (bs_loc, 3 * hb), "free") for dev in range(mesh.p)]
    mac_per_dev = b_loc * n_loc * cfg.s * cfg.s * d

    def local_backward(dev: int) -> None:
        dheads = _split_heads(dctx.blocks[dev], b_loc, cfg.s, n_loc, d)
        p_mat = ctx.probs[dev]
        dp = np.matmul(dheads, ctx.v_heads[dev].transpose(0, 1, 3, 2))
        dv = np.matmul(p_mat.transpose(0, 1, 3, 2), dheads)
        ds = p_mat * (dp - np.sum(dp * p_mat, axis=-1, keepdims=True))
        ds *= scale
        dq = np.matmul(ds, ctx.k_heads[dev])
        dk = np.matmul(ds.transpose(0, 1, 3, 2), ctx.q_heads[dev])
        blk = dqkv_blocks[dev]
        blk[:, :hb] = _merge_heads(dq, bs_loc)
        blk[:, hb:2 * hb] = _merge_heads(dk, bs_loc)
        blk[:, 2 * hb:] = _merge_heads(dv, bs_loc)
        mesh.add_macs(dev, 4 * mac_per_dev)  # dP, dV, dQ, dK

    mesh.each(local_backward)
    dqkv = ShardedMatrix(mesh, cfg.b * cfg.s, 3 * cfg.h, dqkv_blocks)
    _, b_qkv_grad = bias_add_backward(dqkv, ws)
    x_grad, w_qkv_grad = summa_ab_backward(dqkv, ctx.x_in, w_qkv, ws,
                                           a_out_category="backward",
                                           b_out_category="param_grad")
    return x_grad, w_qkv_grad, b_qkv_grad, w_dense_grad, b_dense_grad


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpContext:
    x_in: ShardedMatrix
    mid: ShardedMatrix       # pre-activation h->4h output (forward buffer)
    act: ShardedMatrix       # gelu(mid) (free memory)


def mlp_forward(x: ShardedMatrix, w1: ShardedMatrix, b1: RowHostedVector,
                w2: ShardedMatrix, b2: RowHostedVector, cfg: ModelConfig,
                ws: Workspace) -> tuple[ShardedMatrix, MlpContext]:
    """h -> 4h product, local GELU, 4h -> h product (plus bias adds)."""
    mesh = x.mesh
    mid = summa_ab(x, w1, ws, out_category="forward", tag="summa")
    bias_add_forward(mid, b1, ws)
    act_blocks = [ws.alloc(dev, blk.shape, "free") for dev, blk in enumerate(mid.blocks)]
    mesh.each(lambda dev: np.copyto(act_blocks[dev], dense.gelu(mid.blocks[dev])))
    act = ShardedMatrix(mesh, mid.global_rows, mid.global_cols, act_blocks)
    out = summa_ab(act, w2, ws, out_category="forward", tag="summa")
    bias_add_forward(out, b2, ws)
    return out, MlpContext(x_in=x, mid=mid, act=act)


def mlp_backward(out_grad: ShardedMatrix, ctx: MlpContext, w1: ShardedMatrix,
                 w2: ShardedMatrix, cfg: ModelConfig, ws: Workspace):
    """Gradients for x, w1, b1, w2, b2 with the local GELU backward between."""
    mesh = out_grad.mesh
    _, b2_grad = bias_add_backward(out_grad, ws)
    dact, w2_grad = summa_ab_backward(out_grad, ctx.act, w2, ws,
                                      a_out_category="backward",
                                      b_out_category="param_grad")
    mesh.each(lambda dev: np.copyto(
        dact.blocks[dev], dense.gelu_backward(ctx.mid.blocks[dev], dact.blocks[dev])))
    _, b1_grad = bias_add_backward(dact, ws)
    x_grad, w1_grad = summa_ab_backward(dact, ctx.x_in, w1, ws,
                                        a_out_category="backward",
                                        b_out_category="param_grad")
    return x_grad, w1_grad, b1_grad, w2_grad, b2_grad


# ---------------------------------------------------------------------------
# lm head and cross entropy
# ---------------------------------------------------------------------------

def lm_head_logits(x: ShardedMatrix, table: ShardedMatrix, ws: Workspace,
                   out_category: str = "free", tag: str = "lmhead") -> ShardedMatrix:
    """Vocabulary logits x table^T, reusing the embedding table's partition."""
    return summa_abt(x, table, ws, out_category=out_category, tag=tag)


def lm_head_backward(logits_grad: ShardedMatrix, x: ShardedMatrix, table: ShardedMatrix,
                     ws: Workspace, x_out_category: str = "free",
                     w_out_category: str = "free",
                     tag: str = "lmhead") -> tuple[ShardedMatrix, ShardedMatrix]:
    return summa_abt_backward(logits_grad, x, table, ws,
                              a_out_category=x_out_category,
                              b_out_category=w_out_category, tag=tag)


@dataclass
class CrossEntropyContext:
    softmax: list[np.ndarray]       # q_j shards per device, zero on padded columns
    owned: list[np.ndarray]         # bool mask: label of token t lives on this device
    local_label_col: list[np.ndarray]
    tokens_total: int
    loss_per_token: list[np.ndarray]


def cross_entropy_forward(logits: ShardedMatrix, labels: np.ndarray, cfg: ModelConfig,
                          ws: Workspace, tag: str = "loss") -> tuple[float, CrossEntropyContext]:
    """Token-wise H = log(sum_i e^{x_i}) - x_l, averaged over the b*s tokens.

    Numerically stabilized with a row all-reduced max; the denominator and
    the owned x_l term share one packed row all-reduce. Padded vocabulary
    columns are masked to -inf and contribute nothing. The softmax shards
    are saved for backward.
    """
    mesh = logits.mesh
    q = mesh.q
    v_pad = cfg.v_padded(q)
    vb = v_pad // q
    if np.min(labels) < 0 or np.max(labels) >= cfg.v:
        raise ConfigError(f"labels must lie in [0, {cfg.v})")
    lab = [_token_block(labels, i, q) for i in range(q)]
    work: list[np.ndarray] = [None] * mesh.p      # type: ignore[list-item]
    local_max = [None] * mesh.p
    for dev in range(mesh.p):
        j = dev % q
        blk = np.array(logits.blocks[dev])
        n_real = min(max(cfg.v - j * vb, 0), vb)
        blk[:, n_real:] = -np.inf
        work[dev] = blk
        local_max[dev] = np.max(blk, axis=1) if n_real else np.full(blk.shape[0], -np.inf)
    maxes: list[np.ndarray | None] = [None] * mesh.p
    for i in range(q):
        for j, arr in enumerate(mesh.all_reduce_row(
                i, [local_max[mesh.flat(i, j)] for j in range(q)], op="max", tag=tag)):
            maxes[mesh.flat(i, j)] = arr
    exp_blocks = [None] * mesh.p
    packed = [None] * mesh.p
    owned = [None] * mesh.p
    local_col = [None] * mesh.p
    for dev in range(mesh.p):
        j = dev % q
        with np.errstate(invalid="ignore"):
            e = np.exp(work[dev] - maxes[dev][:, None])
        e[~np.isfinite(e)] = 0.0
        exp_blocks[dev] = e
        own = (lab[dev // q] >= j * vb) & (lab[dev // q] < (j + 1) * vb)
        col = np.where(own, lab[dev // q] - j * vb, 0)
        xl = np.where(own, work[dev][np.arange(work[dev].shape[0]), col], 0.0)
        packed[dev] = np.stack([e.sum(axis=1), xl], axis=1)
        owned[dev] = own
        local_col[dev] = col
    totals: list[np.ndarray | None] = [None] * mesh.p
    for i in range(q):
        for j, arr in enumerate(mesh.all_reduce_row(
                i, [packed[mesh.flat(i, j)] for j in range(q)], tag=tag)):
            totals[mesh.flat(i, j)] = arr
    softmax = [None] * mesh.p
    losses = [None] * mesh.p
    for dev in range(mesh.p):
        denom = totals[dev][:, 0]
        sm = ws.alloc(dev, exp_blocks[dev].shape, "free")
        np.divide(exp_blocks[dev], denom[:, None], out=sm)
        softmax[dev] = sm
        losses[dev] = np.log(denom) + maxes[dev] - totals[dev][:, 1]
    # global mean: one scalar per device row, summed down each column
    partials = [np.array([losses[dev].sum()]) for dev in range(mesh.p)]
    total_loss: float | None = None
    for j in range(q):
        copies = mesh.all_reduce_col(j, [partials[mesh.flat(i, j)] for i in range(q)], tag=tag)
        if j == 0:
            total_loss = float(copies[0][0])
    tokens_total = cfg.b * cfg.s
    ctx = CrossEntropyContext(softmax=softmax, owned=owned, local_label_col=local_col,
                              tokens_total=tokens_total, loss_per_token=losses)
    return total_loss / tokens_total, ctx


def cross_entropy_backward(ctx: CrossEntropyContext, mesh: Mesh, ws: Workspace,
                           upstream: float = 1.0,
                           out_category: str = "free") -> list[np.ndarray]:
    """Per-token logits gradient q_j (and q_l - 1 at the label), scaled by
    upstream / (b*s) for the mean; returns per-device gradient blocks."""
    scale = upstream / ctx.tokens_total
    grads = []
    for dev in range(mesh.p):
        g = ws.alloc(dev, ctx.softmax[dev].shape, out_category)
        np.multiply(ctx.softmax[dev], scale, out=g)
        rows = np.nonzero(ctx.owned[dev])[0]
        g[rows, ctx.local_label_col[dev][rows]] -= scale
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# transformer layer
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    w_qkv: ShardedMatrix          # [h, 3h], column-interleaved per device column
    b_qkv: RowHostedVector
    w_dense: ShardedMatrix        # [h, h]
    b_dense: RowHostedVector
    w1: ShardedMatrix             # [h, 4h]
    b1: RowHostedVector
    w2: ShardedMatrix             # [4h, h]
    b2: RowHostedVector
    ln1_gamma: RowHostedVector
    ln1_beta: RowHostedVector
    ln2_gamma: RowHostedVector
    ln2_beta: RowHostedVector


@dataclass
class LayerGrads:
    w_qkv: ShardedMatrix
    b_qkv: RowHostedVector
    w_dense: ShardedMatrix
    b_dense: RowHostedVector
    w1: ShardedMatrix
    b1: RowHostedVector
    w2: ShardedMatrix
    b2: RowHostedVector
    ln1_gamma: RowHostedVector
    ln1_beta: RowHostedVector
    ln2_gamma: RowHostedVector
    ln2_beta: RowHostedVector


@dataclass
class LayerSaved:
    x_in: ShardedMatrix
    ln1: LayerNormContext
    attn: AttentionContext
    y1: ShardedMatrix
    ln2: LayerNormContext
    mlp: MlpContext
    out: ShardedMatrix


class TransformerLayer:
    """Pre-norm layer: y = x + Attn(LN1(x)); out = y + MLP(LN2(y)).

    Residual adds run in place on the attention/MLP output blocks, so the
    forward buffer holds exactly the four SUMMA outputs (9*b*s*h/p scalars).
    """

    def __init__(self, mesh: Mesh, cfg: ModelConfig, params: LayerParams,
                 skip_dead_recompute: bool = False) -> None:
        self.mesh = mesh
        self.cfg = cfg
        self.params = params
        # when recomputing forward for backward, the 4h->h product's output
        # feeds only the (already checkpointed) next layer and may be skipped
        self.skip_dead_recompute = skip_dead_recompute
        self._recompute_mode = False
        self._last_was_skip = False

    def recompute_forward(self, x: ShardedMatrix, ws: Workspace):
        """Forward as re-run inside a checkpointed backward."""
        self._recompute_mode = True
        try:
            return self.forward(x, ws)
        finally:
            self._recompute_mode = False

    def forward(self, x: ShardedMatrix, ws: Workspace) -> tuple[ShardedMatrix, LayerSaved]:
        p = self.params
        cfg = self.cfg
        self._last_was_skip = self._recompute_mode and self.skip_dead_recompute
        a1, ln1_ctx = layernorm_forward(x, p.ln1_gamma, p.ln1_beta, cfg, ws)
        att, attn_ctx = attention_forward(a1, p.w_qkv, p.b_qkv, p.w_dense, p.b_dense, cfg, ws)
        self.mesh.each(lambda dev: np.add(att.blocks[dev], x.blocks[dev],
                                          out=att.blocks[dev]))
        y1 = att
        a2, ln2_ctx = layernorm_forward(y1, p.ln2_gamma, p.ln2_beta, cfg, ws)
        if self._last_was_skip:
            mid = summa_ab(a2, p.w1, ws, out_category="forward", tag="summa")
            bias_add_forward(mid, p.b1, ws)
            act_blocks = [ws.alloc(dev, blk.shape, "free")
                          for dev, blk in enumerate(mid.blocks)]
            self.mesh.each(lambda dev: np.copyto(act_blocks[dev],
                                                 dense.gelu(mid.blocks[dev])))
            act = ShardedMatrix(self.mesh, mid.global_rows, mid.global_cols, act_blocks)
            mlp_ctx = MlpContext(x_in=a2, mid=mid, act=act)
            out = y1  # 4h->h output not rebuilt; backward never reads it
        else:
            mlp_out, mlp_ctx = mlp_forward(a2, p.w1, p.b1, p.w2, p.b2, cfg, ws)
            self.mesh.each(lambda dev: np.add(mlp_out.blocks[dev], y1.blocks[dev],
                                              out=mlp_out.blocks[dev]))
            out = mlp_out
        return out, LayerSaved(x_in=x, ln1=ln1_ctx, attn=attn_ctx, y1=y1,
                               ln2=ln2_ctx, mlp=mlp_ctx, out=out)

    def backward(self, out_grad: ShardedMatrix, saved: LayerSaved,
                 ws: Workspace) -> tuple[ShardedMatrix, LayerGrads]:
        cfg = self.cfg
        mesh = self.mesh
        q = mesh.q
        bsh_p = (cfg.b * cfg.s // q) * (cfg.h // q)
        # merged-buffer mode: QKV, attention-output and layer-output slots are
        # dead once their consumers' contexts exist; release them for grads
        dead_slots = 4 if self._last_was_skip else 5
        for dev in range(mesh.p):
            ws.release_forward(dev, dead_slots * bsh_p)
        p = self.params
        da2, w1_g, b1_g, w2_g, b2_g = mlp_backward(out_grad, saved.mlp, p.w1, p.w2, cfg, ws)
        dy1_ln, ln2_g, ln2_b = layernorm_backward(da2, saved.ln2, cfg, ws)
        dy1_blocks = [ws.alloc(dev, blk.shape, "free")
                      for dev, blk in enumerate(out_grad.blocks)]
        mesh.each(lambda dev: np.add(out_grad.blocks[dev], dy1_ln.blocks[dev],
                                     out=dy1_blocks[dev]))
        dy1 = ShardedMatrix(mesh, out_grad.global_rows, out_grad.global_cols, dy1_blocks)
        da1, wqkv_g, bqkv_g, wd_g, bd_g = attention_backward(dy1, saved.attn, p.w_qkv,
                                                             p.w_dense, cfg, ws)
        dx_ln, ln1_g, ln1_b = layernorm_backward(da1, saved.ln1, cfg, ws)
        dx_blocks = [ws.alloc(dev, blk.shape, "free")
                     for dev, blk in enumerate(dy1_blocks)]
        mesh.each(lambda dev: np.add(dy1_blocks[dev], dx_ln.blocks[dev],
                                     out=dx_blocks[dev]))
        dx = ShardedMatrix(mesh, out_grad.global_rows, out_grad.global_cols, dx_blocks)
        grads = LayerGrads(w_qkv=wqkv_g, b_qkv=bqkv_g, w_dense=wd_g, b_dense=bd_g,
                           w1=w1_g, b1=b1_g, w2=w2_g, b2=b2_g,
                           ln1_gamma=ln1_g, ln1_beta=ln1_b,
                           ln2_gamma=ln2_g, ln2_beta=ln2_b)
        return dx, grads

    def apply_sgd(self, grads: LayerGrads, lr: float) -> None:
        p = self.params
        for w, g in ((p.w_qkv, grads.w_qkv), (p.w_dense, grads.w_dense),
                     (p.w1, grads.w1), (p.w2, grads.w2)):
            for dev in range(self.mesh.p):
                w.blocks[dev] -= lr * g.blocks[dev]
        for vec, g in ((p.b_qkv, grads.b_qkv), (p.b_dense, grads.b_dense),
                       (p.b1, grads.b1), (p.b2, grads.b2),
                       (p.ln1_gamma, grads.ln1_gamma), (p.ln1_beta, grads.ln1_beta),
                       (p.ln2_gamma, grads.ln2_gamma), (p.ln2_beta, grads.ln2_beta)):
            for j in range(self.mesh.q):
                vec.shards[j] -= lr * g.shards[j]
