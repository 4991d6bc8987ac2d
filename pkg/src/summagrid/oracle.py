"""Serial single-context reference model: ground truth for the mesh.

Runs the identical math (pre-norm layers, tanh GELU, 1/sqrt(h/n) score
scaling, tied lm-head, mean token cross entropy, optional position-0
classifier branch) on whole matrices, reusing the dense kernels, and keeps
every intermediate so the distributed path can be compared tensor by
tensor. Gradients come from explicit matrix calculus; an independent
central-finite-difference oracle cross-checks them.

Golden files are a small versioned text format: a config header, the loss,
and per-parameter gradient checksums (sum and sum of squares).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dense
from .errors import ConfigError, ShapeError
from .layers import ModelConfig

_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "gelu": (dense.gelu, dense.gelu_backward),
    # test hook: linear path for hand-derived matrix-calculus checks
    "identity": (lambda x: x.copy(), lambda x, g: g.copy()),
}


@dataclass
class SerialModel:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    classifier: bool = False
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


def _layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    h = x.shape[1]
    mu = x.sum(axis=1) / h
    var = (x * x).sum(axis=1) / h - mu * mu
    rstd = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu[:, None]) * rstd[:, None]
    return x_hat * gamma + beta, {"x_hat": x_hat, "rstd": rstd, "mean": mu, "gamma": gamma}


def _layernorm_bwd(dout: np.ndarray, ctx: dict):
    h = dout.shape[1]
    g = dout * ctx["gamma"]
    sum_xg = (ctx["x_hat"] * g).sum(axis=1) / h
    sum_g = g.sum(axis=1) / h
    dx = ctx["rstd"][:, None] * (g - sum_g[:, None] - ctx["x_hat"] * sum_xg[:, None])
    dgamma = (dout * ctx["x_hat"]).sum(axis=0)
    dbeta = dout.sum(axis=0)
    return dx, dgamma, dbeta


def _split_heads(x: np.ndarray, b: int, s: int, n: int, d: int) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(b, s, n, d).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, n, s, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * s, n * d)


def _attention_fwd(a1: np.ndarray, w_qkv, b_qkv, w_dense, b_dense, cfg: ModelConfig):
    b, s, n, d, h = cfg.b, cfg.s, cfg.n, cfg.head_dim, cfg.h
    qkv = dense.matmul(a1, w_qkv) + b_qkv
    qh = _split_heads(qkv[:, :h], b, s, n, d)
    kh = _split_heads(qkv[:, h:2 * h], b, s, n, d)
    vh = _split_heads(qkv[:, 2 * h:], b, s, n, d)
    scale = 1.0 / math.sqrt(d)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    probs = dense.softmax_rows(scores)
    ctx_mat = _merge_heads(np.matmul(probs, vh))
    out = dense.matmul(ctx_mat, w_dense) + b_dense
    return out, {"a1": a1, "q": qh, "k": kh, "v": vh, "probs": probs, "ctx": ctx_mat}


def _attention_bwd(dout: np.ndarray, ctx: dict, w_qkv, w_dense, cfg: ModelConfig):
    b, s, n, d, h = cfg.b, cfg.s, cfg.n, cfg.head_dim, cfg.h
    scale = 1.0 / math.sqrt(d)
    db_dense = dout.sum(axis=0)
    dw_dense = dense.matmul(dense.transpose(ctx["ctx"]), dout)
    dctx = dense.matmul(dout, dense.transpose(w_dense))
    dheads = _split_heads(dctx, b, s, n, d)
    dp = np.matmul(dheads, ctx["v"].transpose(0, 1, 3, 2))
    dv = np.matmul(ctx["probs"].transpose(0, 1, 3, 2), dheads)
    ds = ctx["probs"] * (dp - np.sum(dp * ctx["probs"], axis=-1, keepdims=True))
    ds *= scale
    dq = np.matmul(ds, ctx["k"])
    dk = np.matmul(ds.transpose(0, 1, 3, 2), ctx["q"])
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1)
    db_qkv = dqkv.sum(axis=0)
    dw_qkv = dense.matmul(dense.transpose(ctx["a1"]), dqkv)
    da1 = dense.matmul(dqkv, dense.transpose(w_qkv))
    return da1, dw_qkv, db_qkv, dw_dense, db_dense


def _cross_entropy_fwd(logits: np.ndarray, labels_flat: np.ndarray):
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    denom = e.sum(axis=1)
    xl = logits[np.arange(logits.shape[0]), labels_flat]
    losses = np.log(denom) + m - xl
    softmax = e / denom[:, None]
    return losses, softmax


def serial_forward(model: SerialModel, tokens: np.ndarray, labels: np.ndarray,
                   cls_labels: np.ndarray | None = None):
    """Loss plus every intermediate needed for the explicit backward."""
    cfg = model.cfg
    if np.min(tokens) < 0 or np.max(tokens) >= cfg.v:
        raise ConfigError(f"token ids must lie in [0, {cfg.v})")
    if np.min(labels) < 0 or np.max(labels) >= cfg.v:
        raise ConfigError(f"labels must lie in [0, {cfg.v})")
    if model.classifier and cls_labels is None:
        raise ConfigError("classifier enabled but cls_labels missing")
    act_fwd, _ = _ACTIVATIONS[model.activation]
    p = model.params
    x = p["table"][tokens.reshape(-1)]
    saved: dict = {"tokens": tokens, "labels": labels, "layers": [], "x0": x}
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        a1, ln1 = _layernorm_fwd(x, p[pre + "ln1_gamma"], p[pre + "ln1_beta"], cfg.eps)
        att, attn = _attention_fwd(a1, p[pre + "w_qkv"], p[pre + "b_qkv"],
                                   p[pre + "w_dense"], p[pre + "b_dense"], cfg)
        y1 = x + att
        a2, ln2 = _layernorm_fwd(y1, p[pre + "ln2_gamma"], p[pre + "ln2_beta"], cfg.eps)
        mid = dense.matmul(a2, p[pre + "w1"]) + p[pre + "b1"]
        act = act_fwd(mid)
        y = y1 + dense.matmul(act, p[pre + "w2"]) + p[pre + "b2"]
        saved["layers"].append({"x": x, "ln1": ln1, "attn": attn, "y1": y1,
                                "ln2": ln2, "a2": a2, "mid": mid, "act": act})
        x = y
    logits = dense.matmul(x, dense.transpose(p["table"]))
    losses, softmax = _cross_entropy_fwd(logits, labels.reshape(-1))
    loss = losses.sum() / (cfg.b * cfg.s)
    saved.update({"x_final": x, "softmax": softmax, "logits": logits, "losses": losses})
    if model.classifier:
        x0 = x.reshape(cfg.b, cfg.s, cfg.h)[:, 0, :]
        cls_logits = dense.matmul(x0, p["cls_w"])
        cls_losses, cls_softmax = _cross_entropy_fwd(cls_logits, cls_labels)
        loss = loss + cls_losses.sum() / cfg.b
        saved.update({"cls_x0": x0, "cls_softmax": cls_softmax, "cls_labels": cls_labels})
    return loss, saved


def serial_backward(model: SerialModel, saved: dict, upstream: float = 1.0) -> dict[str, np.ndarray]:
    """Explicit analytic gradients for every parameter tensor."""
    cfg = model.cfg
    p = model.params
    _, act_bwd = _ACTIVATIONS[model.activation]
    grads: dict[str, np.ndarray] = {}
    n_tok = cfg.b * cfg.s
    g_logits = saved["softmax"] * (upstream / n_tok)
    g_logits[np.arange(n_tok), saved["labels"].reshape(-1)] -= upstream / n_tok
    dx = dense.matmul(g_logits, p["table"])
    grads["table"] = dense.matmul(dense.transpose(g_logits), saved["x_final"])
    if model.classifier:
        scale = upstream / cfg.b
        g_cls = saved["cls_softmax"] * scale
        g_cls[np.arange(cfg.b), saved["cls_labels"]] -= scale
        grads["cls_w"] = dense.matmul(dense.transpose(saved["cls_x0"]), g_cls)
        dx0 = dense.matmul(g_cls, dense.transpose(p["cls_w"]))
        dx3 = dx.reshape(cfg.b, cfg.s, cfg.h)
        dx3[:, 0, :] += dx0
        dx = dx3.reshape(n_tok, cfg.h)
    for i in reversed(range(cfg.num_layers)):
        pre = f"layers.{i}."
        ctx = saved["layers"][i]
        dy = dx
        grads[pre + "b2"] = dy.sum(axis=0)
        grads[pre + "w2"] = dense.matmul(dense.transpose(ctx["act"]), dy)
        dact = dense.matmul(dy, dense.transpose(p[pre + "w2"]))
        dmid = act_bwd(ctx["mid"], dact)
        grads[pre + "b1"] = dmid.sum(axis=0)
        grads[pre + "w1"] = dense.matmul(dense.transpose(ctx["a2"]), dmid)
        da2 = dense.matmul(dmid, dense.transpose(p[pre + "w1"]))
        dy1_ln, dg2, db2v = _layernorm_bwd(da2, ctx["ln2"])
        grads[pre + "ln2_gamma"] = dg2
        grads[pre + "ln2_beta"] = db2v
        dy1 = dy + dy1_ln
        da1, dwqkv, dbqkv, dwd, dbd = _attention_bwd(dy1, ctx["attn"], p[pre + "w_qkv"],
                                                     p[pre + "w_dense"], cfg)
        grads[pre + "w_qkv"] = dwqkv
        grads[pre + "b_qkv"] = dbqkv
        grads[pre + "w_dense"] = dwd
        grads[pre + "b_dense"] = dbd
        dx_ln, dg1, db1v = _layernorm_bwd(da1, ctx["ln1"])
        grads[pre + "ln1_gamma"] = dg1
        grads[pre + "ln1_beta"] = db1v
        dx = dy1 + dx_ln
    table_grad = grads["table"]
    np.add.at(table_grad, saved["tokens"].reshape(-1), dx)
    return grads


def loss_fn(model: SerialModel, tokens: np.ndarray, labels: np.ndarray,
            cls_labels: np.ndarray | None = None) -> Callable[[], float]:
    """Closure over the model's (mutable) params for finite differencing."""
    def f() -> float:
        loss, _ = serial_forward(model, tokens, labels, cls_labels)
        return float(loss)
    return f


def finite_diff_grad(f: Callable[[], float], param: np.ndarray,
                     indices: Sequence[tuple], step: float = 1e-4) -> np.ndarray:
    """Central differences (f(t+d) - f(t-d)) / (2d) at the given coordinates.

    ``param`` is perturbed in place and restored, so ``f`` must read it live.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be > 0")
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        orig = param[idx]
        param[idx] = orig + step
        up = f()
        param[idx] = orig - step
        down = f()
        param[idx] = orig
        out[k] = (up - down) / (2.0 * step)
    return out


def sample_indices(shape: tuple[int, ...], count: int, rng: np.random.Generator) -> list[tuple]:
    """Up to ``count`` distinct coordinates of an array of the given shape."""
    total = int(np.prod(shape))
    chosen = rng.choice(total, size=min(count, total), replace=False)
    return [tuple(int(c) for c in np.unravel_index(flat, shape)) for flat in sorted(chosen)]


# ---------------------------------------------------------------------------
# golden files
# ---------------------------------------------------------------------------

GOLDEN_HEADER = "summagrid-golden v1"


def write_golden(path, cfg: ModelConfig, seed: int, loss: float,
                 grads: dict[str, np.ndarray], classifier: bool = False) -> None:
    lines = [
        GOLDEN_HEADER,
        (f"config b={cfg.b} s={cfg.s} h={cfg.h} n={cfg.n} v={cfg.v} "
         f"layers={cfg.num_layers} eps={cfg.eps!r} seed={seed} "
         f"classifier={int(classifier)}"),
        f"loss {loss!r}",
    ]
    for name in sorted(grads):
        g = grads[name]
        lines.append(f"grad {name} sum {float(g.sum())!r} sumsq {float((g * g).sum())!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_golden(path) -> dict:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != GOLDEN_HEADER:
        raise ConfigError(f"not a golden file (header {lines[:1]!r})")
    out: dict = {"config": {}, "grads": {}}
    for kv in lines[1].split()[1:]:
        key, val = kv.split("=")
        out["config"][key] = float(val) if key == "eps" else int(val)
    for ln in lines[2:]:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "loss":
            out["loss"] = float(parts[1])
        elif parts[0] == "grad":
            out["grads"][parts[1]] = {"sum": float(parts[3]), "sumsq": float(parts[5])}
    return out


def compare_golden(golden: dict, loss: float, grads: dict[str, np.ndarray],
                   tol: float = 1e-9) -> list[str]:
    """Names of checks whose values drifted beyond tol (empty = match)."""
    bad = []
    if abs(golden["loss"] - loss) > tol:
        bad.append(f"loss: {golden['loss']!r} vs {loss!r}")
    for name, sums in golden["grads"].items():
        g = grads[name]
        if abs(float(g.sum()) - sums["sum"]) > tol * max(1.0, abs(sums["sum"])):
            bad.append(f"{name}.sum")
        if abs(float((g * g).sum()) - sums["sumsq"]) > tol * max(1.0, abs(sums["sumsq"])):
            bad.append(f"{name}.sumsq")
    return bad
