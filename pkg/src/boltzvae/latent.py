"""Discrete-unit reparameterization: hard thresholding and sigmoid smoothing.

A unit with success probability q and logit l = logit(q) is sampled as
z = step(rho - (1 - q)) for uniform rho; the differentiable surrogate
replaces the step with a tempered sigmoid,

    zeta = sigmoid((logit(rho) + l) / tau),

which recovers the hard sample as tau -> 0.  The tie rho == 1 - q resolves
to z = 1 so the hard path is deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit

RHO_EPS = 1e-7


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def hard_sample(q, rho) -> np.ndarray:
    """z = 1 iff rho >= 1 - q, elementwise."""
    q = np.asarray(q, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("q must lie strictly inside (0, 1)")
    if np.any((rho < 0) | (rho > 1)):
        raise ValueError("rho must lie in [0, 1]")
    return (rho >= 1.0 - q).astype(np.float64)


def hard_sample_from_logits(logits, rho) -> np.ndarray:
    """Same threshold in logit form, z = step(logit(rho) + l); unlike the
    probability form this stays exact for saturated logits."""
    logits = np.asarray(logits, dtype=np.float64)
    rho = np.clip(np.asarray(rho, dtype=np.float64), RHO_EPS, 1.0 - RHO_EPS)
    return (logit(rho) + logits >= 0.0).astype(np.float64)


def smooth_sample(logits, rho, tau: float) -> np.ndarray:
    """Tempered-sigmoid relaxation; rho is clamped away from {0, 1}."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    rho = np.clip(np.asarray(rho, dtype=np.float64), RHO_EPS, 1.0 - RHO_EPS)
    return expit((logit(rho) + logits) / tau)


def smooth_sample_dlogits(zeta, tau: float) -> np.ndarray:
    """d zeta / d logits at the sampled value: zeta (1 - zeta) / tau."""
    zeta = np.asarray(zeta, dtype=np.float64)
    return zeta * (1.0 - zeta) / tau


def log_q(logits, value) -> np.ndarray:
    """Factorial-Bernoulli log mass sum_l [v log s(l) + (1-v) log(1-s(l))].

    Evaluated on smoothed values during training and discrete values at
    evaluation; per-row sums over the trailing axis.
    """
    logits = np.asarray(logits, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    return (value * logits - softplus(logits)).sum(axis=-1)


def log_q_dlogits(logits, value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64) - expit(np.asarray(logits, dtype=np.float64))


def log_q_dvalue(logits, value) -> np.ndarray:
    return np.broadcast_to(np.asarray(logits, dtype=np.float64), np.shape(value)).copy()


def reinforce_gradient(logits, f_values, samples) -> np.ndarray:
    """Score-function estimate d/dl E[f] = E[f * (z - s(l))] (no baseline).

    Kept as a documented baseline only; the reparameterized path is the
    training route because this estimator's variance is far larger.
    """
    score = log_q_dlogits(logits, samples)
    return (np.asarray(f_values)[:, None] * score).mean(axis=0)
