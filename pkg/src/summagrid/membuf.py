"""Pre-allocated buffer planning and checkpointed execution.

Buffers are modeled as instrumented arena allocators: every allocation is a
fresh f64 array plus bump-pointer accounting with a high-water mark, and
"out of memory" is an assertion against the plan rather than a real
exhaustion (desk-scale runs cannot exhaust memory the way a large cluster
does). ``reset`` returns an arena's level to zero while keeping its peak.

Per-layer buffer roles:

* workspace    - staging for broadcast/reduce temporaries inside SUMMA steps
* forward      - outputs of the four SUMMA products of a transformer layer
                 ("QKV", "dense", "h to 4h", "4h to h"), 9*b*s*h/p scalars
* backward     - input gradients of those four products, 7*b*s*h/p
* param_grad   - parameter gradients
* conjunction  - the one activation-gradient shard handed between layers
* free         - unplanned residents (normalization outputs, attention
                 probabilities, staging for the heads); tracked, not capped

Checkpointed execution keeps exactly one saved tensor per layer (the layer
input, b*s*h/p scalars) and re-runs the layer's forward from that copy
before its backward, so forward/backward arenas are reset at every layer
boundary and their peaks are independent of depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BufferOverflowError, CheckpointMissingError, ConfigError
from .summa import ShardedMatrix


def exact_div(a: int, b: int, what: str = "value") -> int:
    if a % b:
        raise ConfigError(f"{what}: {a} not divisible by {b}")
    return a // b


class Arena:
    """Accounting allocator for one buffer category on one device."""

    def __init__(self, name: str, capacity: int | None = None) -> None:
        self.name = name
        self.capacity = capacity
        self.used = 0
        self.high_water = 0

    def alloc(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        self.used += n
        if self.capacity is not None and self.used > self.capacity:
            raise BufferOverflowError(
                f"arena {self.name!r}: {self.used} scalars exceed planned {self.capacity}"
            )
        self.high_water = max(self.high_water, self.used)
        return np.zeros(shape)

    def release(self, nscalars: int) -> None:
        """Return scalars to the arena (merged forward/backward reuse)."""
        self.used = max(0, self.used - nscalars)

    def reset(self) -> None:
        self.used = 0


_CATEGORIES = ("workspace", "forward", "backward", "param_grad", "param_grad_tied",
               "conjunction", "free", "replicated")


class Workspace:
    """Per-device arena bundle; every device owns its arenas exclusively.

    With ``merge_fwd_bwd`` the forward and backward categories share one
    arena per device, and layer backward passes release the forward slots
    whose contents are provably unused by gradients, modeling the
    output-buffer reuse scheme. Correctness is identical under both flags.
    """

    def __init__(
        self,
        p: int,
        capacities: dict[str, int | None] | None = None,
        merge_fwd_bwd: bool = False,
    ) -> None:
        caps = dict.fromkeys(_CATEGORIES, None)
        if capacities:
            caps.update(capacities)
        self.p = p
        self.merge_fwd_bwd = merge_fwd_bwd
        self.arenas: dict[str, list[Arena]] = {}
        for cat in _CATEGORIES:
            if merge_fwd_bwd and cat == "backward":
                continue
            cap = caps[cat]
            if merge_fwd_bwd and cat == "forward":
                fcap, bcap = caps["forward"], caps["backward"]
                cap = None if fcap is None or bcap is None else fcap + bcap
            self.arenas[cat] = [Arena(cat, cap) for _ in range(p)]
        if merge_fwd_bwd:
            self.arenas["backward"] = self.arenas["forward"]

    def alloc(self, dev: int, shape: tuple[int, ...], category: str = "free") -> np.ndarray:
        return self.arenas[category][dev].alloc(shape)

    def reset_all(self, category: str) -> None:
        for arena in self.arenas[category]:
            arena.reset()

    def release_forward(self, dev: int, nscalars: int) -> None:
        """No-op unless merged: model reuse of dead forward slots in backward."""
        if self.merge_fwd_bwd:
            self.arenas["forward"][dev].release(nscalars)

    def peak(self, category: str) -> np.ndarray:
        return np.array([a.high_water for a in self.arenas[category]], dtype=np.int64)

    def peaks(self) -> dict[str, np.ndarray]:
        out = {}
        for cat in _CATEGORIES:
            if self.merge_fwd_bwd and cat == "backward":
                continue
            out[cat] = self.peak(cat)
        return out


@dataclass(frozen=True)
class BufferPlan:
    """Planned per-device buffer sizes in scalars (param_grad for one layer,
    quoted for a row-0 device, which additionally hosts the vector shards)."""

    workspace_scalars: int
    forward_scalars: int
    backward_scalars: int
    param_grad_scalars: int
    conjunction_scalars: int


def plan_buffers(cfg, mesh_cfg) -> BufferPlan:
    """Per-device buffer plan for one transformer layer.

    ``cfg`` needs b, s, h attributes (a ModelConfig); ``mesh_cfg`` needs q.
    Workspace is sized as the max over the layer's four SUMMA products of
    |A block| + |B block| + |C block|, an upper bound on any single step's
    staging (each step stages two of the three).
    """
    q = mesh_cfg.q
    p = q * q
    b, s, h = cfg.b, cfg.s, cfg.h
    bs = b * s
    exact_div(b, q, "batch size")
    exact_div(h, q, "hidden size")
    bsh_p = exact_div(bs * h, p, "b*s*h")
    hh_p = exact_div(h * h, p, "h*h")
    summa_calls = (
        (bs * h, h * 3 * h, bs * 3 * h),     # QKV projection
        (bs * h, h * h, bs * h),             # attention dense
        (bs * h, h * 4 * h, bs * 4 * h),     # h -> 4h
        (bs * 4 * h, 4 * h * h, bs * h),     # 4h -> h
    )
    workspace = max((a + w + c) // p for a, w, c in summa_calls)
    return BufferPlan(
        workspace_scalars=workspace,
        forward_scalars=9 * bsh_p,
        backward_scalars=7 * bsh_p,
        param_grad_scalars=12 * hh_p + 13 * (h // q),
        conjunction_scalars=bsh_p,
    )


class CheckpointStore:
    """Per-device saved layer inputs: exactly one shard per layer."""

    def __init__(self, p: int) -> None:
        self.p = p
        self._saved: dict[int, ShardedMatrix] = {}
        self.used = np.zeros(p, dtype=np.int64)
        self.high_water = np.zeros(p, dtype=np.int64)

    def save(self, layer_idx: int, x: ShardedMatrix) -> ShardedMatrix:
        blocks = [blk.copy() for blk in x.blocks]
        copy = ShardedMatrix(x.mesh, x.global_rows, x.global_cols, blocks)
        self._saved[layer_idx] = copy
        for dev, blk in enumerate(blocks):
            self.used[dev] += blk.size
        np.maximum(self.high_water, self.used, out=self.high_water)
        return copy

    def get(self, layer_idx: int) -> ShardedMatrix:
        try:
            return self._saved[layer_idx]
        except KeyError:
            raise CheckpointMissingError(f"no checkpoint saved for layer {layer_idx}") from None

    def discard(self, layer_idx: int) -> None:
        saved = self._saved.pop(layer_idx, None)
        if saved is not None:
            for dev, blk in enumerate(saved.blocks):
                self.used[dev] -= blk.size

    def count(self) -> int:
        return len(self._saved)


def clone_to_conjunction(x: ShardedMatrix, ws: Workspace) -> ShardedMatrix:
    """Copy an activation-gradient shard into the (reset) conjunction arena."""
    ws.reset_all("conjunction")
    blocks = []
    for dev, blk in enumerate(x.blocks):
        dst = ws.alloc(dev, blk.shape, "conjunction")
        np.copyto(dst, blk)
        blocks.append(dst)
    return ShardedMatrix(x.mesh, x.global_rows, x.global_cols, blocks)


def checkpointed_forward(layers: Sequence, x0: ShardedMatrix, store: CheckpointStore,
                         ws: Workspace) -> ShardedMatrix:
    """Run layers in sequence keeping only their inputs in ``store``.

    Each layer's input is checkpointed first, then the forward and free
    arenas are reset and the layer runs from the stored copy, so the
    forward-buffer peak covers a single layer regardless of depth. Saved
    per-layer contexts are discarded (backward recomputes them).
    """
    x = x0
    for li, layer in enumerate(layers):
        x = store.save(li, x)
        ws.reset_all("forward")
        ws.reset_all("free")
        x, _ = layer.forward(x, ws)
    return x


def checkpointed_backward(layers: Sequence, loss_grad: ShardedMatrix, store: CheckpointStore,
                          ws: Workspace, eager_update: bool = False, lr: float = 0.0):
    """Backward over checkpointed layers; returns (input_grad, per-layer grads).

    For each layer, newest first: re-run forward from the checkpointed input
    (charging its communication and computation again), run backward, clone
    the input gradient into the conjunction buffer, then reset the forward,
    free and backward arenas. With ``eager_update`` the layer's parameters
    are updated immediately and the parameter-gradient arena reset, so its
    high-water mark covers one layer instead of all of them (the grads list
    then holds None entries).
    """
    dy = loss_grad
    grads: list = [None] * len(layers)
    for li in reversed(range(len(layers))):
        x_in = store.get(li)
        ws.reset_all("forward")
        ws.reset_all("free")
        fwd = getattr(layers[li], "recompute_forward", layers[li].forward)
        _, saved = fwd(x_in, ws)
        ws.reset_all("backward")
        dx, layer_grads = layers[li].backward(dy, saved, ws)
        dy = clone_to_conjunction(dx, ws)
        store.discard(li)
        if eager_update:
            layers[li].apply_sgd(layer_grads, lr)
            ws.reset_all("param_grad")
        else:
            grads[li] = layer_grads
    return dy, grads


@dataclass
class MemoryReport:
    """Per-device peak scalars by buffer category."""

    p: int
    peaks: dict[str, np.ndarray]

    def total(self, categories: Sequence[str]) -> np.ndarray:
        out = np.zeros(self.p, dtype=np.int64)
        for cat in categories:
            if cat in self.peaks:
                out = out + self.peaks[cat]
        return out


def memory_report(ws: Workspace, store: CheckpointStore | None = None,
                  params: np.ndarray | None = None) -> MemoryReport:
    """Snapshot of per-device peaks; includes the checkpoint store and
    (static) parameter residency when provided."""
    peaks = {cat: arr.copy() for cat, arr in ws.peaks().items()}
    if ws.merge_fwd_bwd:
        peaks["forward+backward"] = peaks.pop("forward")
    if store is not None:
        peaks["checkpoint"] = store.high_water.copy()
    if params is not None:
        peaks["params"] = np.asarray(params, dtype=np.int64).copy()
    return MemoryReport(p=ws.p, peaks=peaks)


def memory_csv(report: MemoryReport) -> str:
    """CSV export, columns: device,category,peak_scalars."""
    lines = ["device,category,peak_scalars"]
    for dev in range(report.p):
        for cat in sorted(report.peaks):
            lines.append(f"{dev},{cat},{int(report.peaks[cat][dev])}")
    return "\n".join(lines) + "\n"
