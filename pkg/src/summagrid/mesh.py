"""Simulated q x q device mesh: workers, row/column collectives, cost ledger.

The mesh is driven from a single controller context. Collectives move data
and charge per-device costs using the tree/ring time models

    T_broadcast = T_reduce = log2(g) * beta * B        (binomial tree, g ranks)
    T_allreduce = 2 * beta * (g - 1) * B / g           (ring, g ranks)

where B is the payload in scalars. log is base 2, matching the depth of a
binomial tree. Latency alpha is kept out of the charges; per-device message
counts are recorded so an alpha term can be applied in reporting without
re-running.

Two execution modes:

* ``lockstep`` (default): per-device local compute runs inline in rank order
  0..p-1; bit-reproducible and used by all verification suites.
* ``threaded``: one worker thread per device consumes local-compute closures
  from its own task queue (a channel). Collectives still execute at
  controller synchronization points with rank-ordered folds, so numerical
  results match lockstep bit for bit while local math runs concurrently.

Reduction order is fixed by rank (group position 0 -> g-1) in both modes.
"""

from __future__ import annotations

import enum
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, MeshMismatchError, ShapeError


class Placement(enum.Enum):
    """How mesh ranks map onto physical nodes (Natural: row-major fill)."""

    NATURAL = "natural"
    BUNCHED = "bunched"


@dataclass(frozen=True)
class CostParams:
    """beta = inverse bandwidth (time per scalar); alpha = per-message latency."""

    beta: float = 1.0
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.beta <= 0.0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class MeshConfig:
    """q devices per row/column (p = q*q total), node size g, rank placement."""

    q: int
    node_size: int = 1
    placement: Placement = Placement.NATURAL

    def __post_init__(self) -> None:
        if self.q < 1:
            raise ConfigError(f"mesh side q must be >= 1, got {self.q}")
        if self.node_size < 1:
            raise ConfigError(f"node_size must be >= 1, got {self.node_size}")
        if self.p % self.node_size != 0:
            raise ConfigError(
                f"device count p={self.p} not divisible by node_size={self.node_size}"
            )

    @property
    def p(self) -> int:
        return self.q * self.q


@dataclass(frozen=True)
class DeviceRank:
    row: int
    col: int
    node: int


_COUNTERS = (
    "broadcast_cost",
    "reduce_cost",
    "allreduce_cost",
    "scalars_sent_internode",
    "scalars_sent_intranode",
    "macs",
    "messages_sent",
)


class CommLedger:
    """Per-device monotone counters (see _COUNTERS) plus per-tag cost splits.

    Costs are in beta*scalars units; scalars/macs/messages are exact integer
    counts. ``cost_by_tag[(tag, kind)]`` splits broadcast/reduce/allreduce
    charges by the caller-supplied tag so e.g. the SUMMA share of a layer's
    traffic can be isolated from bias/layer-norm housekeeping.
    """

    def __init__(self, p: int) -> None:
        self.p = p
        self.broadcast_cost = np.zeros(p)
        self.reduce_cost = np.zeros(p)
        self.allreduce_cost = np.zeros(p)
        self.scalars_sent_internode = np.zeros(p, dtype=np.int64)
        self.scalars_sent_intranode = np.zeros(p, dtype=np.int64)
        self.macs = np.zeros(p, dtype=np.int64)
        self.messages_sent = np.zeros(p, dtype=np.int64)
        self.cost_by_tag: dict[tuple[str, str], np.ndarray] = {}

    def _tag_array(self, tag: str, kind: str) -> np.ndarray:
        key = (tag, kind)
        arr = self.cost_by_tag.get(key)
        if arr is None:
            arr = np.zeros(self.p)
            self.cost_by_tag[key] = arr
        return arr

    def snapshot(self) -> "CommReport":
        return CommReport(
            p=self.p,
            broadcast_cost=self.broadcast_cost.copy(),
            reduce_cost=self.reduce_cost.copy(),
            allreduce_cost=self.allreduce_cost.copy(),
            scalars_sent_internode=self.scalars_sent_internode.copy(),
            scalars_sent_intranode=self.scalars_sent_intranode.copy(),
            macs=self.macs.copy(),
            messages_sent=self.messages_sent.copy(),
            cost_by_tag={k: v.copy() for k, v in self.cost_by_tag.items()},
        )


@dataclass
class CommReport:
    """Immutable snapshot of a ledger; arithmetic helpers for test deltas."""

    p: int
    broadcast_cost: np.ndarray
    reduce_cost: np.ndarray
    allreduce_cost: np.ndarray
    scalars_sent_internode: np.ndarray
    scalars_sent_intranode: np.ndarray
    macs: np.ndarray
    messages_sent: np.ndarray
    cost_by_tag: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def minus(self, earlier: "CommReport") -> "CommReport":
        tags = set(self.cost_by_tag) | set(earlier.cost_by_tag)
        zeros = np.zeros(self.p)
        return CommReport(
            p=self.p,
            broadcast_cost=self.broadcast_cost - earlier.broadcast_cost,
            reduce_cost=self.reduce_cost - earlier.reduce_cost,
            allreduce_cost=self.allreduce_cost - earlier.allreduce_cost,
            scalars_sent_internode=self.scalars_sent_internode - earlier.scalars_sent_internode,
            scalars_sent_intranode=self.scalars_sent_intranode - earlier.scalars_sent_intranode,
            macs=self.macs - earlier.macs,
            messages_sent=self.messages_sent - earlier.messages_sent,
            cost_by_tag={
                k: self.cost_by_tag.get(k, zeros) - earlier.cost_by_tag.get(k, zeros)
                for k in tags
            },
        )

    def tag_cost(self, tag: str, kinds: Iterable[str] = ("broadcast", "reduce", "allreduce")) -> np.ndarray:
        total = np.zeros(self.p)
        for kind in kinds:
            arr = self.cost_by_tag.get((tag, kind))
            if arr is not None:
                total = total + arr
        return total

    def comm_cost(self) -> np.ndarray:
        return self.broadcast_cost + self.reduce_cost + self.allreduce_cost

    def equals(self, other: "CommReport") -> bool:
        if not (
            np.array_equal(self.broadcast_cost, other.broadcast_cost)
            and np.array_equal(self.reduce_cost, other.reduce_cost)
            and np.array_equal(self.allreduce_cost, other.allreduce_cost)
            and np.array_equal(self.scalars_sent_internode, other.scalars_sent_internode)
            and np.array_equal(self.scalars_sent_intranode, other.scalars_sent_intranode)
            and np.array_equal(self.macs, other.macs)
            and np.array_equal(self.messages_sent, other.messages_sent)
        ):
            return False
        if set(self.cost_by_tag) != set(other.cost_by_tag):
            return False
        return all(np.array_equal(v, other.cost_by_tag[k]) for k, v in self.cost_by_tag.items())


def placement_traffic(report: CommReport) -> dict[str, int]:
    """Total scalars crossing node boundaries vs staying inside a node."""
    return {
        "internode": int(report.scalars_sent_internode.sum()),
        "intranode": int(report.scalars_sent_intranode.sum()),
    }


class _Worker(threading.Thread):
    def __init__(self, dev: int) -> None:
        super().__init__(name=f"mesh-worker-{dev}", daemon=True)
        self.dev = dev
        self.tasks: queue.Queue = queue.Queue()
        self.done: queue.Queue = queue.Queue()

    def run(self) -> None:
        while True:
            fn = self.tasks.get()
            if fn is None:
                return
            try:
                fn(self.dev)
                self.done.put(None)
            except BaseException as exc:  # re-raised on the controller
                self.done.put(exc)


def _bunched_tile(q: int, node_size: int) -> tuple[int, int]:
    """Most-square (rows, cols) tile with rows*cols == node_size, both dividing q."""
    best = None
    for a in range(1, node_size + 1):
        if node_size % a:
            continue
        b = node_size // a
        if q % a or q % b:
            continue
        if best is None or abs(a - b) < abs(best[0] - best[1]):
            best = (a, b)
    if best is None:
        raise ConfigError(
            f"no (rows x cols) tiling of node_size={node_size} fits mesh side q={q}"
        )
    return best


class Mesh:
    """The simulated device grid. Drive it from one controller context."""

    def __init__(
        self,
        cfg: MeshConfig,
        cost: CostParams | None = None,
        mode: str = "lockstep",
    ) -> None:
        if mode not in ("lockstep", "threaded"):
            raise ConfigError(f"unknown mesh mode {mode!r}")
        self.cfg = cfg
        self.cost = cost or CostParams()
        self.mode = mode
        self.q = cfg.q
        self.p = cfg.p
        self.ledger = CommLedger(self.p)
        self._row_groups = [[r * self.q + c for c in range(self.q)] for r in range(self.q)]
        self._col_groups = [[r * self.q + c for r in range(self.q)] for c in range(self.q)]
        if cfg.placement is Placement.BUNCHED:
            ta, tb = _bunched_tile(self.q, cfg.node_size)
            self._node = [
                (r // ta) * (self.q // tb) + (c // tb)
                for r in range(self.q)
                for c in range(self.q)
            ]
        else:
            self._node = [flat // cfg.node_size for flat in range(self.p)]
        self._workers: list[_Worker] | None = None
        self._closed = False

    # -- topology ---------------------------------------------------------

    def flat(self, row: int, col: int) -> int:
        return row * self.q + col

    def rank(self, flat: int) -> DeviceRank:
        return DeviceRank(row=flat // self.q, col=flat % self.q, node=self._node[flat])

    def node_of(self, flat: int) -> int:
        return self._node[flat]

    def row_group(self, row: int) -> list[int]:
        return self._row_groups[row]

    def col_group(self, col: int) -> list[int]:
        return self._col_groups[col]

    def all_group(self) -> list[int]:
        return list(range(self.p))

    def nodes_in_group(self, group: Sequence[int]) -> set[int]:
        return {self._node[d] for d in group}

    # -- local execution ---------------------------------------------------

    def each(self, fn: Callable[[int], None], devices: Sequence[int] | None = None) -> None:
        """Run fn(dev) for every device (a synchronization point in both modes)."""
        devs = range(self.p) if devices is None else devices
        if self.mode == "lockstep":
            for dev in devs:
                fn(dev)
            return
        if self._workers is None:
            self._workers = [_Worker(d) for d in range(self.p)]
            for w in self._workers:
                w.start()
        devs = list(devs)
        for dev in devs:
            self._workers[dev].tasks.put(fn)
        first_exc: BaseException | None = None
        for dev in devs:
            res = self._workers[dev].done.get()
            if res is not None and first_exc is None:
                first_exc = res
        if first_exc is not None:
            raise first_exc

    def close(self) -> None:
        if self._workers is not None and not self._closed:
            for w in self._workers:
                w.tasks.put(None)
            for w in self._workers:
                w.join(timeout=5.0)
        self._closed = True

    def __enter__(self) -> "Mesh":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- accounting --------------------------------------------------------

    def add_macs(self, dev: int, count: int) -> None:
        self.ledger.macs[dev] += count

    def add_macs_group(self, devices: Sequence[int], count: int) -> None:
        for dev in devices:
            self.ledger.macs[dev] += count

    def local_matmul(self, dev: int, a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None,
                     accumulate: bool = False) -> np.ndarray:
        """a @ b on one device, charging rows*inner*cols MACs to its counter."""
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"local matmul inner dims differ: {a.shape} x {b.shape}")
        self.ledger.macs[dev] += int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1]
        if accumulate:
            out += a @ b
            return out
        if out is not None:
            np.matmul(a, b, out=out)
            return out
        return a @ b

    def _tree_edges(self, group: Sequence[int], root_pos: int) -> list[tuple[int, int]]:
        """Binomial-tree edges (parent_flat, child_flat), ranks ordered in-group."""
        g = len(group)
        edges: list[tuple[int, int]] = []
        step = 1
        while step < g:
            for vr in range(step):
                if vr + step < g:
                    src = group[(vr + root_pos) % g]
                    dst = group[(vr + step + root_pos) % g]
                    edges.append((src, dst))
            step *= 2
        return edges

    def _count_edge_scalars(self, sender: int, receiver: int, nscalars: int) -> None:
        led = self.ledger
        if self._node[sender] == self._node[receiver]:
            led.scalars_sent_intranode[sender] += nscalars
        else:
            led.scalars_sent_internode[sender] += nscalars
        led.messages_sent[sender] += 1

    def _charge_tree(self, group: Sequence[int], root_pos: int, nscalars: int,
                     tag: str, kind: str, reverse: bool) -> None:
        g = len(group)
        cost = math.log2(g) * self.cost.beta * nscalars if g > 1 else 0.0
        led = self.ledger
        counter = led.broadcast_cost if kind == "broadcast" else led.reduce_cost
        tagged = led._tag_array(tag, kind)
        for dev in group:
            counter[dev] += cost
            tagged[dev] += cost
        for parent, child in self._tree_edges(group, root_pos):
            if reverse:  # reduce: data flows child -> parent
                self._count_edge_scalars(child, parent, nscalars)
            else:
                self._count_edge_scalars(parent, child, nscalars)

    def _charge_ring(self, group: Sequence[int], nscalars: int, tag: str) -> None:
        g = len(group)
        led = self.ledger
        cost = 2.0 * self.cost.beta * (g - 1) * nscalars / g if g > 1 else 0.0
        tagged = led._tag_array(tag, "allreduce")
        for dev in group:
            led.allreduce_cost[dev] += cost
            tagged[dev] += cost
        if g > 1:
            # ring: 2(g-1) rounds, each rank forwards nscalars/g to its successor
            per_dev = 2 * (g - 1) * nscalars // g if nscalars % g == 0 else None
            for pos, dev in enumerate(group):
                nxt = group[(pos + 1) % g]
                sent = per_dev if per_dev is not None else int(round(2 * (g - 1) * nscalars / g))
                if self._node[dev] == self._node[nxt]:
                    led.scalars_sent_intranode[dev] += sent
                else:
                    led.scalars_sent_internode[dev] += sent
                led.messages_sent[dev] += 2 * (g - 1)

    # -- collectives -------------------------------------------------------

    @staticmethod
    def _stage(ws, dev: int, shape: tuple[int, ...], category: str) -> np.ndarray:
        if ws is None:
            return np.empty(shape)
        return ws.alloc(dev, shape, category)

    def _broadcast(self, group: Sequence[int], root_pos: int, block: np.ndarray,
                   tag: str, ws, category: str) -> list[np.ndarray]:
        block = np.asarray(block, dtype=np.float64)
        copies = []
        for dev in group:
            dst = self._stage(ws, dev, block.shape, category)
            np.copyto(dst, block)
            copies.append(dst)
        self._charge_tree(group, root_pos, block.size, tag, "broadcast", reverse=False)
        return copies

    def broadcast_row(self, row: int, root_col: int, block: np.ndarray, tag: str = "misc",
                      ws=None, category: str = "workspace") -> list[np.ndarray]:
        """Copy ``block`` from (row, root_col) to every device in the row.

        Returns the q staged copies in column order (the root's entry is a
        staged copy too, mirroring workspace use on a real device).
        """
        if not 0 <= root_col < self.q:
            raise ConfigError(f"broadcast root column {root_col} out of range for q={self.q}")
        return self._broadcast(self._row_groups[row], root_col, block, tag, ws, category)

    def broadcast_col(self, col: int, root_row: int, block: np.ndarray, tag: str = "misc",
                      ws=None, category: str = "workspace") -> list[np.ndarray]:
        """Column dual of broadcast_row; returns q copies in row order."""
        if not 0 <= root_row < self.q:
            raise ConfigError(f"broadcast root row {root_row} out of range for q={self.q}")
        return self._broadcast(self._col_groups[col], root_row, block, tag, ws, category)

    def _reduce(self, group: Sequence[int], dest_pos: int, blocks: Sequence[np.ndarray],
                tag: str) -> np.ndarray:
        shape = blocks[0].shape
        for b in blocks[1:]:
            if b.shape != shape:
                raise ShapeError(f"reduce blocks differ in shape: {shape} vs {b.shape}")
        acc = blocks[0].astype(np.float64, copy=True)
        for b in blocks[1:]:  # fixed rank order: group position 0 -> g-1
            acc += b
        self._charge_tree(group, dest_pos, acc.size, tag, "reduce", reverse=True)
        return acc

    def reduce_row(self, row: int, dest_col: int, blocks: Sequence[np.ndarray],
                   tag: str = "misc") -> np.ndarray:
        """Elementwise sum of the row's blocks, delivered to (row, dest_col)."""
        if not 0 <= dest_col < self.q:
            raise ConfigError(f"reduce destination column {dest_col} out of range for q={self.q}")
        return self._reduce(self._row_groups[row], dest_col, blocks, tag)

    def reduce_col(self, col: int, dest_row: int, blocks: Sequence[np.ndarray],
                   tag: str = "misc") -> np.ndarray:
        """Column dual of reduce_row."""
        if not 0 <= dest_row < self.q:
            raise ConfigError(f"reduce destination row {dest_row} out of range for q={self.q}")
        return self._reduce(self._col_groups[col], dest_row, blocks, tag)

    def _all_reduce(self, group: Sequence[int], blocks: Sequence[np.ndarray], op: str,
                    tag: str) -> list[np.ndarray]:
        shape = blocks[0].shape
        for b in blocks[1:]:
            if b.shape != shape:
                raise ShapeError(f"all_reduce blocks differ in shape: {shape} vs {b.shape}")
        acc = blocks[0].astype(np.float64, copy=True)
        for b in blocks[1:]:
            if op == "sum":
                acc += b
            elif op == "max":
                np.maximum(acc, b, out=acc)
            else:
                raise ConfigError(f"unknown all_reduce op {op!r}")
        self._charge_ring(group, acc.size, tag)
        return [acc.copy() for _ in group]

    def all_reduce_row(self, row: int, blocks: Sequence[np.ndarray], op: str = "sum",
                       tag: str = "misc") -> list[np.ndarray]:
        """Every device in the row receives the op-fold of all q blocks."""
        return self._all_reduce(self._row_groups[row], blocks, op, tag)

    def all_reduce_col(self, col: int, blocks: Sequence[np.ndarray], op: str = "sum",
                       tag: str = "misc") -> list[np.ndarray]:
        return self._all_reduce(self._col_groups[col], blocks, op, tag)

    def all_reduce_all(self, blocks: Sequence[np.ndarray], op: str = "sum",
                       tag: str = "misc") -> list[np.ndarray]:
        """Ring all-reduce over the whole p-device group (1D-baseline pattern)."""
        return self._all_reduce(self.all_group(), blocks, op, tag)


def create_mesh(cfg: MeshConfig, cost: CostParams | None = None, mode: str = "lockstep") -> Mesh:
    """Build a mesh with fresh ledger; raises ConfigError on invalid config."""
    return Mesh(cfg, cost=cost, mode=mode)


def ledger_report(mesh: Mesh) -> CommReport:
    """Side-effect-free snapshot of per-device counters."""
    return mesh.ledger.snapshot()


def check_same_mesh(*objs) -> Mesh:
    mesh = objs[0].mesh
    for o in objs[1:]:
        if o.mesh is not mesh:
            raise MeshMismatchError("operands live on different meshes")
    return mesh


def ledger_csv(report: CommReport) -> str:
    """CSV export: one row per device per counter.

    Column order: rank_row,rank_col,counter_name,value. Devices appear in
    row-major rank order; counters in the documented order below. Cost
    counters are floats (repr formatting, byte-stable); the rest integers.
    """
    q = int(math.isqrt(report.p))
    lines = ["rank_row,rank_col,counter_name,value"]
    float_counters = {"broadcast_cost", "reduce_cost", "allreduce_cost"}
    for flat in range(report.p):
        r, c = flat // q, flat % q
        for name in _COUNTERS:
            val = getattr(report, name)[flat]
            txt = repr(float(val)) if name in float_counters else str(int(val))
            lines.append(f"{r},{c},{name},{txt}")
    return "\n".join(lines) + "\n"
