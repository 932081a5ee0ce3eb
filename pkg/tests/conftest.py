"""Shared test helpers: seeded RNGs and the finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import pytest

from pseudowhiten import numerics as nm


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def randomize_biases(params: Mapping[str, nm.Tensor], rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move zero-initialized biases to a generic point.

    Finite differences are only a valid oracle away from ReLU kinks; with
    all-zero biases a fully dead hidden row makes downstream pre-activations
    exactly zero, where the subgradient and the centered difference disagree.
    """
    for name, p in params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            p.data[:] = rng.normal(0.0, scale, size=p.data.shape)


def numeric_gradient(f: Callable[[], float], t: nm.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of f with respect to every entry of t."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with nm.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return g


def gradient_check(
    build_loss: Callable[[], nm.Tensor],
    params: Mapping[str, nm.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare autodiff gradients against central finite differences.

    Uses a vector-level relative error: ||g_ad - g_fd|| / max(||g_ad||,
    ||g_fd||, 1e-8) over all checked coordinates.  When ``sample`` is given,
    only that many randomly chosen coordinates per parameter are probed
    (the analytic side is still the full backward pass).
    """
    nm.zero_grads(params)
    loss = build_loss()
    nm.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    def f() -> float:
        return float(build_loss().data)

    ad_parts: list[np.ndarray] = []
    fd_parts: list[np.ndarray] = []
    with nm.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if sample is not None and flat.size > sample:
                assert rng is not None, "sampled gradient check needs an rng"
                idx = rng.choice(flat.size, size=sample, replace=False)
            fd = np.zeros(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f()
                flat[i] = orig - h
                f_minus = f()
                flat[i] = orig
                fd[j] = (f_plus - f_minus) / (2.0 * h)
            ad_parts.append(analytic[name].reshape(-1)[idx])
            fd_parts.append(fd)
    ad = np.concatenate(ad_parts)
    fd = np.concatenate(fd_parts)
    err = np.linalg.norm(ad - fd) / max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-8)
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return err
