"""Block matrix products on the q x q mesh: C=AB, C=AB^T, C=A^TB.

Each global matrix is split evenly into q x q sub-blocks, block (i, j) owned
by device (i, j). The three product forms are closed under differentiation:

    C = A B      ->  A_grad = C_grad B^T,   B_grad = A^T C_grad
    C = A^T B    ->  A_grad = B C_grad^T,   B_grad = A C_grad
    C = A B^T    ->  A_grad = C_grad B,     B_grad = C_grad^T A

so every backward pass below is itself expressed through the forward forms,
and the only collectives any of them issue are row/column broadcasts and
reduces. Broadcast/reduce temporaries are staged in the caller-provided
workspace; accumulation into C follows step order l = 0..q-1 exactly, and
reduces fold in rank order, so results are bit-reproducible.

Rectangular global shapes are fine; blocks need not be square. Global
dimensions must divide evenly by q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .mesh import Mesh, check_same_mesh


@dataclass
class ShardedMatrix:
    """A global (global_rows x global_cols) matrix split into q x q blocks.

    ``blocks`` is indexed by flat rank (row * q + col); device (i, j) holds
    global rows [i*R/q, (i+1)*R/q) and columns [j*C/q, (j+1)*C/q).
    """

    mesh: Mesh
    global_rows: int
    global_cols: int
    blocks: list[np.ndarray]

    @property
    def block_rows(self) -> int:
        return self.global_rows // self.mesh.q

    @property
    def block_cols(self) -> int:
        return self.global_cols // self.mesh.q

    def block(self, row: int, col: int) -> np.ndarray:
        return self.blocks[row * self.mesh.q + col]

    def copy(self) -> "ShardedMatrix":
        return ShardedMatrix(self.mesh, self.global_rows, self.global_cols,
                             [b.copy() for b in self.blocks])


def scatter(global_mat: np.ndarray, mesh: Mesh, ws=None, category: str = "free") -> ShardedMatrix:
    """Split a global matrix into per-device blocks (copying)."""
    rows, cols = global_mat.shape
    q = mesh.q
    if rows % q or cols % q:
        raise ShapeError(f"matrix {rows}x{cols} not evenly divisible into {q}x{q} blocks")
    rb, cb = rows // q, cols // q
    blocks = []
    for i in range(q):
        for j in range(q):
            dev = mesh.flat(i, j)
            src = global_mat[i * rb:(i + 1) * rb, j * cb:(j + 1) * cb]
            if ws is None:
                blocks.append(np.array(src, dtype=np.float64))
            else:
                dst = ws.alloc(dev, (rb, cb), category)
                np.copyto(dst, src)
                blocks.append(dst)
    return ShardedMatrix(mesh, rows, cols, blocks)


def gather(s: ShardedMatrix) -> np.ndarray:
    """Reassemble the global matrix (test-harness boundary, no cost charged)."""
    q = s.mesh.q
    rb, cb = s.block_rows, s.block_cols
    out = np.empty((s.global_rows, s.global_cols))
    for i in range(q):
        for j in range(q):
            out[i * rb:(i + 1) * rb, j * cb:(j + 1) * cb] = s.block(i, j)
    return out


def _alloc_out(mesh: Mesh, ws, rows_b: int, cols_b: int, category: str) -> list[np.ndarray]:
    return [ws.alloc(dev, (rows_b, cols_b), category) for dev in range(mesh.p)]


def summa_ab(a: ShardedMatrix, b: ShardedMatrix, ws, out_category: str = "free",
             tag: str = "summa") -> ShardedMatrix:
    """C = A B via q steps of row broadcasts of A and column broadcasts of B."""
    mesh = check_same_mesh(a, b)
    if a.global_cols != b.global_rows:
        raise ShapeError(f"summa_ab inner dims differ: {a.global_cols} vs {b.global_rows}")
    q = mesh.q
    m_b, k_b, n_b = a.block_rows, a.block_cols, b.block_cols
    out = _alloc_out(mesh, ws, m_b, n_b, out_category)
    for l in range(q):
        ws.reset_all("workspace")
        a_tmp: list[np.ndarray | None] = [None] * mesh.p
        b_tmp: list[np.ndarray | None] = [None] * mesh.p
        for i in range(q):
            for j, arr in enumerate(mesh.broadcast_row(i, l, a.block(i, l), tag=tag, ws=ws)):
                a_tmp[mesh.flat(i, j)] = arr
        for j in range(q):
            for i, arr in enumerate(mesh.broadcast_col(j, l, b.block(l, j), tag=tag, ws=ws)):
                b_tmp[mesh.flat(i, j)] = arr
        mesh.each(lambda dev: mesh.local_matmul(dev, a_tmp[dev], b_tmp[dev],
                                                out=out[dev], accumulate=True))
    return ShardedMatrix(mesh, a.global_rows, b.global_cols, out)


def summa_abt(a: ShardedMatrix, b: ShardedMatrix, ws, out_category: str = "free",
              tag: str = "summa") -> ShardedMatrix:
    """C = A B^T: column broadcasts of B, local A B_l^T, row reduces to column l."""
    mesh = check_same_mesh(a, b)
    if a.global_cols != b.global_cols:
        raise ShapeError(f"summa_abt contraction dims differ: {a.global_cols} vs {b.global_cols}")
    q = mesh.q
    m_b, n_b = a.block_rows, b.block_rows
    out = _alloc_out(mesh, ws, m_b, n_b, out_category)
    for l in range(q):
        ws.reset_all("workspace")
        b_tmp: list[np.ndarray | None] = [None] * mesh.p
        for j in range(q):
            for i, arr in enumerate(mesh.broadcast_col(j, l, b.block(l, j), tag=tag, ws=ws)):
                b_tmp[mesh.flat(i, j)] = arr
        c_tmp = [ws.alloc(dev, (m_b, n_b), "workspace") for dev in range(mesh.p)]
        mesh.each(lambda dev: mesh.local_matmul(dev, a.blocks[dev], b_tmp[dev].T,
                                                out=c_tmp[dev]))
        for i in range(q):
            summed = mesh.reduce_row(i, l, [c_tmp[mesh.flat(i, j)] for j in range(q)], tag=tag)
            np.copyto(out[mesh.flat(i, l)], summed)
    return ShardedMatrix(mesh, a.global_rows, b.global_rows, out)


def summa_atb(a: ShardedMatrix, b: ShardedMatrix, ws, out_category: str = "free",
              tag: str = "summa") -> ShardedMatrix:
    """C = A^T B: row broadcasts of A, local A_l^T B, column reduces to row l."""
    mesh = check_same_mesh(a, b)
    if a.global_rows != b.global_rows:
        raise ShapeError(f"summa_atb contraction dims differ: {a.global_rows} vs {b.global_rows}")
    q = mesh.q
    m_b, n_b = a.block_cols, b.block_cols
    out = _alloc_out(mesh, ws, m_b, n_b, out_category)
    for l in range(q):
        ws.reset_all("workspace")
        a_tmp: list[np.ndarray | None] = [None] * mesh.p
        for i in range(q):
            for j, arr in enumerate(mesh.broadcast_row(i, l, a.block(i, l), tag=tag, ws=ws)):
                a_tmp[mesh.flat(i, j)] = arr
        c_tmp = [ws.alloc(dev, (m_b, n_b), "workspace") for dev in range(mesh.p)]
        mesh.each(lambda dev: mesh.local_matmul(dev, a_tmp[dev].T, b.blocks[dev],
                                                out=c_tmp[dev]))
        for j in range(q):
            summed = mesh.reduce_col(j, l, [c_tmp[mesh.flat(i, j)] for i in range(q)], tag=tag)
            np.copyto(out[mesh.flat(l, j)], summed)
    return ShardedMatrix(mesh, a.global_cols, b.global_cols, out)


def summa_ab_backward(c_grad: ShardedMatrix, a: ShardedMatrix, b: ShardedMatrix, ws,
                      a_out_category: str = "free", b_out_category: str = "free",
                      tag: str = "summa") -> tuple[ShardedMatrix, ShardedMatrix]:
    """Gradients of C = A B: (C_grad B^T, A^T C_grad)."""
    a_grad = summa_abt(c_grad, b, ws, out_category=a_out_category, tag=tag)
    b_grad = summa_atb(a, c_grad, ws, out_category=b_out_category, tag=tag)
    return a_grad, b_grad


def summa_abt_backward(c_grad: ShardedMatrix, a: ShardedMatrix, b: ShardedMatrix, ws,
                       a_out_category: str = "free", b_out_category: str = "free",
                       tag: str = "summa") -> tuple[ShardedMatrix, ShardedMatrix]:
    """Gradients of C = A B^T: (C_grad B, C_grad^T A)."""
    a_grad = summa_ab(c_grad, b, ws, out_category=a_out_category, tag=tag)
    b_grad = summa_atb(c_grad, a, ws, out_category=b_out_category, tag=tag)
    return a_grad, b_grad


def summa_atb_backward(c_grad: ShardedMatrix, a: ShardedMatrix, b: ShardedMatrix, ws,
                       a_out_category: str = "free", b_out_category: str = "free",
                       tag: str = "summa") -> tuple[ShardedMatrix, ShardedMatrix]:
    """Gradients of C = A^T B: (B C_grad^T, A C_grad)."""
    a_grad = summa_abt(b, c_grad, ws, out_category=a_out_category, tag=tag)
    b_grad = summa_ab(a, c_grad, ws, out_category=b_out_category, tag=tag)
    return a_grad, b_grad
