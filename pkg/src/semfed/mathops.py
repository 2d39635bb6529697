"""Dense float64 math primitives shared by the adapter, trainer and evaluator.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every public
function rejects non-finite input so NaN/Inf can never leak through.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ZeroNormError(ValueError):
    """Raised when a vector that must be normalized has zero length."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def cosine_similarity(a, b) -> float:
    a = as_matrix(a, "a").ravel()
    b = as_matrix(b, "b").ravel()
    if a.shape != b.shape or a.size == 0:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector is undefined")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


def gaussian_kernel(a, b, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    a = as_matrix(a, "a").ravel()
    b = as_matrix(b, "b").ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    d = a - b
    return float(np.exp(-float(d @ d) / (2.0 * sigma * sigma)))


def top_k_indices(values, k: int) -> list[int]:
    """Indices of the ``k`` largest values, ascending by index.

    Ties go to the lower index, which keeps graph construction deterministic.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    v = as_matrix(values, "values").ravel()
    order = np.argsort(-v, kind="stable")
    return sorted(int(i) for i in order[:k])


def row_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; returns (normalized, norms). Zero rows raise."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise ZeroNormError(f"zero-norm rows at {bad}")
    return x / norms[:, None], norms


def masked_row_softmax(logits, mask, scale: float = 1.0) -> np.ndarray:
    """Row softmax of ``scale * logits`` over entries where ``mask`` is true.

    Masked entries come out exactly 0 and a fully masked row is all zeros.
    """
    z = as_matrix(logits, "logits")
    m = np.asarray(mask, dtype=bool)
    if z.shape != m.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {m.shape}")
    s = np.where(m, scale * z, -np.inf)
    row_max = np.max(s, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(m, np.exp(s - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(
    param,
    grad,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Pure: inputs are never modified."""
    p = as_matrix(param, "param")
    g = as_matrix(grad, "grad")
    if p.shape != g.shape or state.m.shape != p.shape or state.v.shape != p.shape:
        raise ValueError(
            f"shape mismatch: param {p.shape}, grad {g.shape}, state {state.m.shape}/{state.v.shape}"
        )
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0) or not eps > 0:
        raise ValueError("invalid Adam hyperparameters")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x0 = as_matrix(x, "x").copy()
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x0.copy())
        flat[i] = orig - eps
        fm = f(x0.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
