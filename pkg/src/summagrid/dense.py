"""Local (single-device) dense f64 kernels.

Every worker in the simulated mesh and the serial reference model use these
same routines, so any mesh-vs-serial discrepancy isolates the distribution
logic rather than the math kernels.

Matrices are 2-d ``numpy.ndarray`` of ``float64`` in row-major (C) order.
All verification math runs in f64; there is no mixed precision here.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# tanh-approximation GELU constants
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator.

    PCG64 is numpy's default counter-based bit generator; for a fixed numpy
    major version the value stream for a given seed is identical on every
    platform, which is what lets the serial model and the mesh initialize
    bit-identical parameters.
    """
    return np.random.Generator(np.random.PCG64(seed))


def uniform_init(rng: np.random.Generator, rows: int, cols: int, scale: float) -> np.ndarray:
    """Symmetric uniform draw in [-scale, scale), shape (rows, cols)."""
    return rng.uniform(-scale, scale, size=(rows, cols))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard product; raises ShapeError on an inner-dimension mismatch."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    """Transposed copy (no aliasing semantics exposed)."""
    return np.ascontiguousarray(a.T)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_backward(x: np.ndarray, up_grad: np.ndarray) -> np.ndarray:
    """up_grad * dGELU/dx evaluated at x."""
    if x.shape != up_grad.shape:
        raise ShapeError(f"gelu_backward shapes differ: {x.shape} vs {up_grad.shape}")
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return up_grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, with per-row max subtraction.

    Accepts any number of leading axes. Rows of all -inf (fully masked) are
    not supported here; callers mask at most part of a row.
    """
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)
