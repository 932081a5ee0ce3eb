"""Objective functions: pseudo-whitening, reconstruction, ensemble variants.

Every whitening-family objective here is one weighted residual kernel,
``sum(weight * (C - target)^2)`` over the full matrix, with the diagonal /
off-diagonal split reported alongside:

* canonical pseudo-whitening ("algorithm1"): target = I + beta * C2_offdiag,
  uniform weight 1;
* the alternative form ("equation1"): target = I + C2_offdiag unscaled,
  weight 1 on the diagonal and beta off it;
* redundancy-reduction baseline: target = I, weight 1 / lambda;
* regularized baseline: target = I + G_offdiag, weight 1 / lambda.

Targets and weights are constants; gradients reach only the correlation
operand, so autoencoders learn exclusively through their reconstruction term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nm
from .correlation import CorrelationMatrix, TargetMatrix, build_target
from .numerics import Tensor

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "WhiteningTerm",
    "TotalLoss",
    "pseudo_whitening_loss",
    "efficient_loss",
    "reconstruction_loss",
    "total_loss",
    "barlow_twins_loss",
    "regularized_bt_loss",
    "gaussian_uncertainty_matrix",
]

EFFICIENT_SYM_TOL = 1e-9


@dataclass
class LossConfig:
    """Weighting factors and objective form for one training run."""

    alpha: float = 0.2
    beta: float = 0.01
    lambda_bt: float = 0.005
    form: str = "algorithm1"  # algorithm1 | equation1
    mode: str = "ensemble"  # ensemble | efficient

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.lambda_bt) < 0:
            raise ValueError("alpha, beta and lambda_bt must be non-negative")
        if self.form not in ("algorithm1", "equation1"):
            raise ValueError(f"unknown loss form '{self.form}'")
        if self.mode not in ("ensemble", "efficient"):
            raise ValueError(f"unknown loss mode '{self.mode}'")


@dataclass
class LossBreakdown:
    """Scalar components of one training step, for the metrics stream."""

    total: float
    whitening: float
    diag_term: float
    offdiag_term: float
    recon_a: float
    recon_b: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total,
            "whitening": self.whitening,
            "diag_term": self.diag_term,
            "offdiag_term": self.offdiag_term,
            "recon_a": self.recon_a,
            "recon_b": self.recon_b,
        }


class WhiteningTerm(NamedTuple):
    value: Tensor
    diag_term: float
    offdiag_term: float


class TotalLoss(NamedTuple):
    value: Tensor
    breakdown: LossBreakdown


def _weighted_residual(c: Tensor, target: np.ndarray, weight: np.ndarray | None) -> WhiteningTerm:
    """sum(weight * (c - target)^2) plus its diagonal/off-diagonal split."""
    if c.shape != target.shape:
        raise nm.ShapeError(f"whitening loss: correlation {c.shape} vs target {target.shape}")
    resid = nm.subtract(c, Tensor(target))
    sq = nm.multiply(resid, resid)
    if weight is not None:
        sq = nm.multiply(sq, Tensor(weight))
    value = nm.tensor_sum(sq)
    sq_data = sq.data
    diag = float(np.trace(sq_data))
    off = float(sq_data.sum() - np.trace(sq_data))
    return WhiteningTerm(value, diag, off)


def pseudo_whitening_loss(c1: CorrelationMatrix, target: TargetMatrix, config: LossConfig) -> WhiteningTerm:
    """Whitening residual of the embedding correlation against the target.

    ``algorithm1`` penalizes the full residual against the beta-scaled
    target; ``equation1`` penalizes the diagonal against 1 and weights the
    off-diagonal residual against the unscaled source by beta.  Only the
    correlation operand receives gradients.
    """
    config.validate()
    d = c1.dim
    if target.dim != d:
        raise nm.ShapeError(f"pseudo_whitening_loss: dims differ: {d} vs {target.dim}")
    if config.form == "algorithm1":
        return _weighted_residual(c1.values, target.values, None)
    eye = np.eye(d)
    weight = eye + config.beta * (1.0 - eye)
    return _weighted_residual(c1.values, eye + target.source_offdiag, weight)


def efficient_loss(
    c_prime: CorrelationMatrix, c_doubleprime: CorrelationMatrix, config: LossConfig
) -> WhiteningTerm:
    """Pseudo-whitening applied to the stacked-view auto-correlations."""
    for name, c in (("C'", c_prime), ("C''", c_doubleprime)):
        skew = np.max(np.abs(c.values.data - c.values.data.T))
        if skew > EFFICIENT_SYM_TOL:
            raise ValueError(f"efficient_loss: {name} is not symmetric (skew {skew:.2e})")
    return pseudo_whitening_loss(c_prime, build_target(c_doubleprime, config.beta), config)


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Summed squared difference over the whole batch (no averaging)."""
    if x.shape != x_hat.shape:
        raise nm.ShapeError(f"reconstruction_loss: shapes differ: {x.shape} vs {x_hat.shape}")
    diff = nm.subtract(x, x_hat)
    return nm.tensor_sum(nm.multiply(diff, diff))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(float(x)))


def total_loss(whitening, recon_a, recon_b, alpha: float) -> TotalLoss:
    """Combine whitening and reconstruction terms: total = L_w + alpha * L_r.

    Accepts tensors (training path) or plain floats (bookkeeping); the
    returned tensor carries the gradient graph, the breakdown the floats.
    """
    if isinstance(whitening, WhiteningTerm):
        w_value, diag, off = whitening
    else:
        w_value = _as_tensor(whitening)
        diag, off = float(w_value.data), 0.0
    ra = _as_tensor(recon_a if recon_a is not None else 0.0)
    rb = _as_tensor(recon_b if recon_b is not None else 0.0)
    if alpha != 0.0:
        value = nm.add(w_value, nm.scalar_multiply(nm.add(ra, rb), alpha))
    else:
        value = w_value
    breakdown = LossBreakdown(
        total=float(w_value.data) + alpha * (float(ra.data) + float(rb.data)),
        whitening=float(w_value.data),
        diag_term=diag,
        offdiag_term=off,
        recon_a=float(ra.data),
        recon_b=float(rb.data),
    )
    return TotalLoss(value, breakdown)


def barlow_twins_loss(c: CorrelationMatrix, lambda_bt: float) -> Tensor:
    """Invariance term plus lambda-weighted redundancy term against identity."""
    d = c.dim
    eye = np.eye(d)
    weight = eye + lambda_bt * (1.0 - eye)
    return _weighted_residual(c.values, eye, weight).value


def regularized_bt_loss(c: CorrelationMatrix, g: np.ndarray, lambda_bt: float) -> Tensor:
    """Baseline loss with off-diagonal residuals taken against a fixed matrix.

    ``g``'s diagonal is ignored; its off-diagonal entries replace the zero
    targets of the plain redundancy-reduction loss.
    """
    d = c.dim
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (d, d):
        raise nm.ShapeError(f"regularized_bt_loss: G shape {g.shape} does not match dim {d}")
    off = g.copy()
    np.fill_diagonal(off, 0.0)
    eye = np.eye(d)
    weight = eye + lambda_bt * (1.0 - eye)
    return _weighted_residual(c.values, eye + off, weight).value


def gaussian_uncertainty_matrix(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric zero-diagonal matrix with standard-normal upper triangle."""
    g = np.zeros((dim, dim))
    iu = np.triu_indices(dim, k=1)
    g[iu] = rng.standard_normal(len(iu[0]))
    g += g.T
    return g
