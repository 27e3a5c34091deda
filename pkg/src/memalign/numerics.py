"""Dense primitives shared by every loss, with their analytic gradients.

All arithmetic is float64. Backward functions take the upstream gradient
and return the gradient w.r.t. the inputs of the forward call.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

NORM_FLOOR = 1e-8


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    return v


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.size != b.size:
        raise ShapeError(f"cosine_similarity: dimension mismatch, len(a)={a.size} len(b)={b.size}")
    na = max(float(np.linalg.norm(a)), NORM_FLOOR)
    nb = max(float(np.linalg.norm(b)), NORM_FLOOR)
    return float(a @ b) / (na * nb)


def cosine_scores(query: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``query`` (D,) against every row of ``slots`` (N, D)."""
    if slots.ndim != 2 or query.shape != (slots.shape[1],):
        raise ShapeError(
            f"query has dimension {query.shape[-1] if query.ndim else 0}, slots have dimension "
            f"{slots.shape[-1] if slots.ndim == 2 else slots.shape}")
    qn = max(float(np.linalg.norm(query)), NORM_FLOOR)
    sn = np.maximum(np.linalg.norm(slots, axis=1), NORM_FLOOR)
    return (slots @ query) / (sn * qn)


def cosine_scores_backward(query: np.ndarray, slots: np.ndarray, scores: np.ndarray,
                           grad_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_scores * cosine_scores(query, slots))``.

    Returns (grad_query, grad_slots). Where a norm sits on the floor the
    floor is a constant, so that norm contributes no gradient.
    """
    qn_raw = float(np.linalg.norm(query))
    qn = max(qn_raw, NORM_FLOOR)
    sn_raw = np.linalg.norm(slots, axis=1)
    sn = np.maximum(sn_raw, NORM_FLOOR)
    g = grad_scores
    # d cos_i / d m_i = q / (|q||m_i|) - cos_i * m_i / |m_i|^2
    grad_slots = np.outer(g / (sn * qn), query)
    live = sn_raw > NORM_FLOOR
    grad_slots[live] -= ((g * scores)[live] / sn[live] ** 2)[:, None] * slots[live]
    grad_query = (g / sn) @ slots / qn
    if qn_raw > NORM_FLOOR:
        grad_query -= float(g @ scores) / qn ** 2 * query
    return grad_query, grad_slots


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(scores, dtype=np.float64)
    z = (z - z.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray, temperature: float) -> np.ndarray:
    """Gradient w.r.t. the pre-temperature scores."""
    return weights * (grad_weights - float(weights @ grad_weights)) / temperature


def kl_divergence(p, q) -> float:
    """D_KL(p || q) in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: length mismatch {p.size} vs {q.size}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)  # 0 ln 0 = 0
    return float(np.sum(terms))


def mse_loss(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "mse_loss")
    return float(np.mean((a - b) ** 2))


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d mse / d a."""
    return 2.0 * (a - b) / a.size


def l1_loss(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "l1_loss")
    return float(np.mean(np.abs(a - b)))


def l1_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d l1 / d a (subgradient 0 at the kink)."""
    return np.sign(a - b) / a.size


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise ConfigError(f"step h must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / denom
