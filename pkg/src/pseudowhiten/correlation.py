"""Normalized cross-/auto-correlation matrices and the whitening target.

Correlation entries are Pearson-style: columns are centered internally and
the (i, j) entry is the inner product of column i of the first operand with
column j of the second, divided by the product of their norms (plus a small
epsilon, so a zero-variance column yields a zero row/column instead of NaN).
Under population-std z-scoring this coincides with ``z_a^T z_b / N``.

The target matrix built from the autoencoder-latent correlation is a
gradient-blocked constant: uncertainty flows into the whitening objective as
data, never as a backpropagation path into the autoencoders.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "CorrelationError",
    "CorrelationMatrix",
    "TargetMatrix",
    "cross_correlation",
    "auto_correlation",
    "build_target",
    "correlation_to_csv",
]

CORR_EPS = 1e-12
BOUND_TOL = 1e-9
SYM_TOL = 1e-12


class CorrelationError(ValueError):
    """A matrix violates the correlation-matrix contract."""


@dataclass
class CorrelationMatrix:
    """D x D normalized correlation; ``values`` stays on the autodiff tape."""

    values: Tensor
    is_auto: bool = False

    def __post_init__(self) -> None:
        v = self.values.data
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise CorrelationError(f"correlation matrix must be square, got {v.shape}")
        top = np.max(np.abs(v)) if v.size else 0.0
        if top > 1.0 + BOUND_TOL:
            raise CorrelationError(f"correlation entries exceed bound: max |entry| = {top}")
        if self.is_auto:
            skew = np.max(np.abs(v - v.T))
            if skew > SYM_TOL:
                raise CorrelationError(f"auto-correlation asymmetric beyond {SYM_TOL}: {skew}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class TargetMatrix:
    """Constant pseudo-whitening target: identity plus beta-scaled off-diagonals."""

    values: np.ndarray
    source_offdiag: np.ndarray  # unscaled source correlation, diagonal zeroed
    beta: float

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def cross_correlation(z_a: Tensor, z_b: Tensor, eps: float = CORR_EPS) -> CorrelationMatrix:
    """Pearson cross-correlation of two [N x D] batches of embeddings.

    Implemented as one fused tape node with an analytic backward pass; the
    composed z-score route stays available as an independent check of the
    same quantity (they agree within 1e-10 on healthy columns).
    """
    if z_a.ndim != 2 or z_b.ndim != 2 or z_a.shape != z_b.shape:
        raise nm.ShapeError(f"cross_correlation: expects equal 2-D shapes, got {z_a.shape} and {z_b.shape}")
    n, _ = z_a.shape
    if n < 2:
        raise nm.ShapeError("cross_correlation: needs at least 2 rows")
    same = z_b is z_a
    a = z_a.data - z_a.data.mean(axis=0)
    b = a if same else z_b.data - z_b.data.mean(axis=0)
    # The tiny shift keeps the norm's reciprocal finite for all-zero columns.
    ra = np.sqrt((a * a).sum(axis=0) + 1e-300)
    rb = ra if same else np.sqrt((b * b).sum(axis=0) + 1e-300)
    num = a.T @ b
    denom = np.outer(ra, rb) + eps
    values = nm.tensor_from_op(
        num / denom,
        (z_a,) if same else (z_a, z_b),
        lambda g: _cross_correlation_backward(g, z_a, z_b, same, a, b, ra, rb, num, denom),
    )
    return CorrelationMatrix(values, is_auto=same)


def _cross_correlation_backward(g, z_a, z_b, same, a, b, ra, rb, num, denom):
    """Gradient of C = (A^T B) / (outer(|A|, |B|) + eps) w.r.t. the raw inputs.

    With W = g / denom and V = -g * num / denom^2:
      dL/dA = B W^T + A * (V s / r)_col,   dL/dB = A W + B * (V^T r / s)_col
    followed by re-centering (the column means were subtracted inside).
    """
    w = g / denom
    v = -g * num / (denom * denom)
    ga = b @ w.T + a * ((v @ rb) / ra)
    gb = a @ w + b * ((v.T @ ra) / rb)
    if same:
        ga = ga + gb
        nm.accumulate_grad(z_a, ga - ga.mean(axis=0))
    else:
        nm.accumulate_grad(z_a, ga - ga.mean(axis=0))
        nm.accumulate_grad(z_b, gb - gb.mean(axis=0))


def auto_correlation(z: Tensor, eps: float = CORR_EPS) -> CorrelationMatrix:
    """Symmetric unit-diagonal correlation of a single stacked batch.

    In the efficient training mode ``z`` stacks both views' projector (or
    autoencoder-latent) outputs, so the row count is twice the batch size.
    """
    if z.ndim != 2:
        raise nm.ShapeError(f"auto_correlation: expects a 2-D operand, got {z.shape}")
    if z.shape[0] < 2:
        raise nm.ShapeError("auto_correlation: needs at least 2 rows")
    return cross_correlation(z, z, eps=eps)


def build_target(c2: CorrelationMatrix, beta: float) -> TargetMatrix:
    """Unit diagonal plus beta-scaled off-diagonals of the source correlation.

    The source's own diagonal is discarded before scaling, and the result is
    detached: no gradient flows back into the source through the target.
    """
    off = c2.values.data.copy()
    np.fill_diagonal(off, 0.0)
    values = np.eye(c2.dim) + beta * off
    return TargetMatrix(values=values, source_offdiag=off, beta=float(beta))


def correlation_to_csv(matrix, path) -> None:
    """Dump a correlation/target matrix row-major with 17 significant digits."""
    data = matrix.values.data if isinstance(matrix, CorrelationMatrix) else np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in data:
            writer.writerow([f"{v:.17g}" for v in row])
