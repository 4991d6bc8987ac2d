"""Command-line entry point.

Subcommands:

    verify   run a model on the mesh and on the serial reference with
             identical parameters; report loss/gradient differences and
             ledger-vs-formula residuals. Exit 0 iff all within tolerance.
    cost     emit the closed-form per-layer cost table as CSV.
    scaling  emit weak|strong scaling predictions as CSV.
    bench    run one layer forward+backward in lockstep and threaded modes,
             assert numerical agreement, report wall-clock times.

Exit codes: 0 pass, 1 numerical failure, 2 configuration error. The
environment variable SUMMA_MESH_MODE supplies the default for --mode.
All outputs are deterministic for fixed flags in lockstep mode.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import costmodel, dense, oracle
from .errors import ConfigError, SummaGridError
from .layers import ModelConfig
from .membuf import Workspace
from .mesh import CostParams, MeshConfig, Placement, create_mesh, ledger_report
from .model import MeshModel, init_global_params, run_loss_and_grads
from .summa import scatter


def _add_common_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--q", default="2",
                    help="mesh side; cost/scaling accept a comma list (default 2)")
    sp.add_argument("--b", type=int, default=4, help="batch size")
    sp.add_argument("--s", type=int, default=8, help="sequence length")
    sp.add_argument("--h", type=int, default=32, help="hidden size")
    sp.add_argument("--n", type=int, default=4, help="attention heads")
    sp.add_argument("--v", type=int, default=32, help="vocabulary size")
    sp.add_argument("--layers", type=int, default=2, help="transformer layer count")
    sp.add_argument("--seed", type=int, default=0, help="parameter/data seed")
    sp.add_argument("--mode", choices=("lockstep", "threaded"),
                    default=os.environ.get("SUMMA_MESH_MODE", "lockstep"),
                    help="execution mode (env SUMMA_MESH_MODE overrides the default)")
    sp.add_argument("--placement", choices=("natural", "bunched"), default="natural")
    sp.add_argument("--node-size", type=int, default=1, help="devices per physical node")
    sp.add_argument("--beta", type=float, default=1.0, help="inverse bandwidth (time/scalar)")
    sp.add_argument("--out", default=None, help="write output to this file instead of stdout")
    sp.add_argument("--tolerance", type=float, default=1e-9,
                    help="loss tolerance for verify (gradients use 10x this)")


def _single_q(args) -> int:
    try:
        return int(args.q)
    except ValueError:
        raise ConfigError(f"--q must be a single integer here, got {args.q!r}") from None


def _q_list(args) -> list[int]:
    try:
        return [int(tok) for tok in str(args.q).split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--q must be an integer or comma list, got {args.q!r}") from None


def _model_config(args) -> ModelConfig:
    return ModelConfig(b=args.b, s=args.s, h=args.h, n=args.n, v=args.v,
                       num_layers=args.layers)


def _mesh(args, q: int):
    cfg = MeshConfig(q=q, node_size=args.node_size,
                     placement=Placement(args.placement))
    return create_mesh(cfg, cost=CostParams(beta=args.beta), mode=args.mode)


def _emit(args, text: str) -> None:
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _sample_data(cfg: ModelConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = dense.make_rng(seed + 1)  # separate stream from parameter init
    tokens = rng.integers(0, cfg.v, size=(cfg.b, cfg.s))
    labels = rng.integers(0, cfg.v, size=(cfg.b, cfg.s))
    return tokens, labels


def cmd_verify(args) -> int:
    q = _single_q(args)
    cfg = _model_config(args)
    cfg.validate_mesh(q)
    tol_loss = args.tolerance
    tol_grad = 10.0 * args.tolerance
    tokens, labels = _sample_data(cfg, args.seed)
    params = init_global_params(cfg, args.seed)
    with _mesh(args, q) as mesh:
        model = MeshModel(mesh, cfg, params)
        loss, grads, _, _ = run_loss_and_grads(model, tokens, labels, checkpointing=True)
        mesh_grads = model.gather_grads(grads)
    serial = oracle.SerialModel(cfg, params)
    ref_loss, saved = oracle.serial_forward(serial, tokens, labels)
    ref_grads = oracle.serial_backward(serial, saved)
    loss_diff = abs(loss - ref_loss)
    grad_diff = max(float(np.max(np.abs(mesh_grads[k] - ref_grads[k]))) for k in ref_grads)
    # ledger-vs-formula residuals on one isolated layer (fwd + checkpointed bwd)
    fwd_resid, bwd_ratio_err, mac_err = _layer_ledger_residuals(args, cfg, params, q)
    lines = [
        f"loss mesh={loss!r} serial={ref_loss!r} max_abs_diff={loss_diff:.3e}",
        f"grads max_abs_diff={grad_diff:.3e}",
        f"ledger summa fwd comm rel residual={fwd_resid:.3e}",
        f"ledger summa bwd/fwd ratio |err|={bwd_ratio_err:.3e}",
        f"ledger fwd MAC mismatch={mac_err}",
    ]
    checks = [
        ("loss", loss_diff <= tol_loss),
        ("grads", grad_diff <= tol_grad),
        ("ledger-comm", fwd_resid <= 1e-9),
        ("ledger-ratio", bwd_ratio_err <= 1e-9),
        ("ledger-macs", mac_err == 0),
    ]
    failed = [name for name, ok in checks if not ok]
    lines.append("PASS" if not failed else f"FAIL: {', '.join(failed)}")
    _emit(args, "\n".join(lines) + "\n")
    return 0 if not failed else 1


def _layer_ledger_residuals(args, cfg: ModelConfig, params, q: int):
    """Run one layer forward + checkpointed backward; compare to formulas."""
    from .membuf import CheckpointStore, checkpointed_backward, checkpointed_forward

    with _mesh(args, q) as mesh:
        model = MeshModel(mesh, cfg, params)
        layer = model.layers[0]
        ws = Workspace(mesh.p)
        rng = dense.make_rng(args.seed + 2)
        x = scatter(rng.standard_normal((cfg.b * cfg.s, cfg.h)), mesh, ws, "forward")
        store = CheckpointStore(mesh.p)
        before = ledger_report(mesh)
        checkpointed_forward([layer], x, store, ws)
        mid = ledger_report(mesh)
        dy = scatter(rng.standard_normal((cfg.b * cfg.s, cfg.h)), mesh, ws, "conjunction")
        checkpointed_backward([layer], dy, store, ws)
        after = ledger_report(mesh)
    fwd = mid.minus(before)
    bwd = after.minus(mid)
    p = q * q
    predicted = costmodel.costs_2d(cfg, p, beta=args.beta)
    fwd_summa = fwd.tag_cost("summa")
    bwd_summa = bwd.tag_cost("summa")
    if p == 1:
        fwd_resid = float(np.max(np.abs(fwd_summa)))
        ratio_err = float(np.max(np.abs(bwd_summa)))
    else:
        fwd_resid = float(np.max(np.abs(fwd_summa - predicted.fwd_comm) / predicted.fwd_comm))
        ratio_err = float(np.max(np.abs(bwd_summa / fwd_summa - 3.0)))
    mac_expected = (12 * cfg.b * cfg.s * cfg.h * cfg.h + 2 * cfg.b * cfg.s * cfg.s * cfg.h) // p
    mac_err = int(np.max(np.abs(fwd.macs - mac_expected)))
    return fwd_resid, ratio_err, mac_err


def cmd_cost(args) -> int:
    cfg = _model_config(args)
    p_list = [qq * qq for qq in _q_list(args)]
    rows = costmodel.cost_table(cfg, p_list, beta=args.beta)
    _emit(args, costmodel.rows_to_csv(rows))
    return 0


def cmd_scaling(args) -> int:
    cfg = _model_config(args)
    p_list = [qq * qq for qq in _q_list(args)]
    rows = costmodel.scaling_table(args.scaling_mode, cfg, p_list, beta=args.beta)
    _emit(args, costmodel.rows_to_csv(rows, extra=costmodel.SCALING_EXTRA))
    return 0


def cmd_bench(args) -> int:
    q = _single_q(args)
    cfg = _model_config(args)
    cfg.validate_mesh(q)
    tokens, labels = _sample_data(cfg, args.seed)
    params = init_global_params(cfg, args.seed)
    results = {}
    for mode in ("lockstep", "threaded"):
        args_mode = argparse.Namespace(**vars(args))
        args_mode.mode = mode
        t0 = time.perf_counter()
        with _mesh(args_mode, q) as mesh:
            model = MeshModel(mesh, cfg, params)
            loss, grads, _, _ = run_loss_and_grads(model, tokens, labels)
            gathered = model.gather_grads(grads)
            report = ledger_report(mesh)
        results[mode] = (loss, gathered, report, time.perf_counter() - t0)
    l_loss, l_grads, l_rep, l_time = results["lockstep"]
    t_loss, t_grads, t_rep, t_time = results["threaded"]
    loss_diff = abs(l_loss - t_loss)
    grad_diff = max(float(np.max(np.abs(l_grads[k] - t_grads[k]))) for k in l_grads)
    ledger_same = l_rep.equals(t_rep)
    lines = [
        f"lockstep: {l_time:.4f}s  threaded: {t_time:.4f}s",
        f"loss diff={loss_diff:.3e}  grad diff={grad_diff:.3e}  ledger identical={ledger_same}",
    ]
    ok = loss_diff <= 1e-9 and grad_diff <= 1e-9 and ledger_same
    lines.append("PASS" if ok else "FAIL: threaded/lockstep mismatch")
    _emit(args, "\n".join(lines) + "\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="summagrid",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("verify", cmd_verify), ("cost", cmd_cost),
                     ("scaling", cmd_scaling), ("bench", cmd_bench)):
        sp = sub.add_parser(name)
        if name == "scaling":
            sp.add_argument("scaling_mode", choices=("weak", "strong"))
        _add_common_flags(sp)
        sp.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SummaGridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
