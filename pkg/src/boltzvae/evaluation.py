"""Post-training measurement: likelihood bounds, unit usage, and mode probes.

Evaluation always uses hard (zero-temperature) latent draws; the smoothed
relaxation exists only for training gradients.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import chi2_contingency

from . import rbm
from .latent import log_q
from .nets import bernoulli_loglik
from .samplers import _sweep_bits, random_state


def hard_encode(model, x, rng):
    """One hard latent draw per row plus the logits used to score it."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rho = rng.random((x.shape[0], model.conn.num_nodes))
    z, cache = model.encoder.encode(x, rho, model.tau, train=False, hard=True)
    return z, cache


def log_likelihood(model, xs, K: int, log_z: float, log_z_err: float, rng,
                   chunk: int = 64) -> tuple[float, float]:
    """K-sample importance bound on the test log-likelihood, in nats.

    log w = log p(x|z) - H(z) - log q(z|x); the partition-function estimate
    is folded in once and its error is propagated in quadrature with the
    per-example scatter.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    per_example = np.empty(len(xs))
    for start in range(0, len(xs), chunk):
        xb = xs[start : start + chunk]
        x_rep = np.repeat(xb, K, axis=0)
        z, cache = hard_encode(model, x_rep, rng)
        o = model.decoder.forward(z, train=False)
        lw = (
            bernoulli_loglik(o, x_rep)
            - rbm.energy(model.prior, z)
            - (log_q(cache["l1"], cache["z1"]) + log_q(cache["l2"], cache["z2"]))
        )
        lw = lw.reshape(len(xb), K)
        per_example[start : start + len(xb)] = logsumexp(lw, axis=1) - np.log(K)
    per_example -= log_z
    mean = float(per_example.mean())
    scatter = float(per_example.std(ddof=1) / np.sqrt(len(per_example))) if len(per_example) > 1 else 0.0
    return mean, float(np.hypot(scatter, log_z_err))


def active_units(model, xs, rng, threshold: float = 0.01) -> int:
    """Units whose hard-sample variance over the set exceeds the threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if len(xs) == 0:
        raise ValueError("empty evaluation set")
    z, _ = hard_encode(model, xs, rng)
    return int((z.var(axis=0) > threshold).sum())


def gibbs_walk(model, steps: int, rng, frames_include_start: bool = True):
    """Block-Gibbs trajectory through the prior, decoded frame by frame.

    Starts from a uniform latent configuration; each frame advances every
    color class once (one block update for Bernoulli, two for the bipartite
    kinds, four for the quadripartite patch).  Returns (latents, decoded
    probabilities).
    """
    conn = model.conn
    bits = random_state(conn, 1, rng)
    Wsym = model.prior.coupling_matrix()
    classes = conn.color_classes()
    latents = [bits[0].copy()]
    for _ in range(steps):
        _sweep_bits(bits, model.prior.b, Wsym, classes, rng)
        latents.append(bits[0].copy())
    latents = np.asarray(latents if frames_include_start else latents[1:])
    decoded = expit(model.decoder.forward(latents, train=False))
    return latents, decoded


def latent_lag_autocorr(frames: np.ndarray, lag: int = 1) -> float:
    """Mean per-unit Pearson autocorrelation at the given lag.

    Units frozen over the walk carry no signal and are skipped; returns 0
    when every unit is frozen.
    """
    frames = np.asarray(frames, dtype=np.float64)
    a, b = frames[:-lag], frames[lag:]
    va, vb = a.std(axis=0), b.std(axis=0)
    ok = (va > 0) & (vb > 0)
    if not ok.any():
        return 0.0
    cov = ((a - a.mean(axis=0)) * (b - b.mean(axis=0))).mean(axis=0)
    return float((cov[ok] / (va[ok] * vb[ok])).mean())


def frame_cosine_similarity(decoded: np.ndarray) -> float:
    """Mean cosine similarity between consecutive decoded frames."""
    a, b = decoded[:-1], decoded[1:]
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float((num / np.maximum(den, 1e-12)).mean())


def generate(model, sampler, n: int):
    """Draw prior samples and decode them to pixel probabilities."""
    if n == 0:
        return np.zeros((0, model.decoder.out_dim))
    draws = sampler.draw(model.prior, n)
    return expit(model.decoder.forward(draws.bits, train=False))


def ablate_couplings(model):
    """Copy of the model with all prior couplings zeroed (biases kept)."""
    prior = rbm.BmParams(model.conn, model.prior.b.copy(), np.zeros_like(model.prior.W))
    return dataclasses.replace(
        model, prior=prior,
        prior_gb=np.zeros_like(model.prior.b),
        prior_gW=np.zeros_like(model.prior.W),
    )


def estimate_log_z(prior, rng, pa_config=None) -> tuple[float, float]:
    """Exact log Z below the enumeration cap, PA estimate with error above."""
    from .samplers import PaConfig, population_annealing

    if int(prior.conn.active_mask.sum()) <= rbm.ENUM_CAP:
        return rbm.exact_log_z(prior), 0.0
    batch = population_annealing(prior, pa_config or PaConfig(), rng)
    return batch.meta["log_z"], batch.meta["log_z_err"]


def quadratic_features(x) -> np.ndarray:
    """Raw pixels plus upper-triangle pairwise products.

    The linear probe cannot separate pattern families defined by pixel
    co-occurrence (bars vs stripes); the quadratic map makes them linear.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    iu = np.triu_indices(x.shape[1], k=1)
    return np.concatenate([x, x[:, iu[0]] * x[:, iu[1]]], axis=1)


class SoftmaxClassifier:
    """Tiny multinomial logistic probe used as a measurement instrument."""

    def __init__(self, n_features: int, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.W = 0.01 * rng.standard_normal((n_features, n_classes))
        self.b = np.zeros(n_classes)

    def _probs(self, X):
        logits = X @ self.W + self.b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def fit(self, X, y, epochs: int = 200, lr: float = 0.5):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        onehot = np.eye(self.W.shape[1])[y]
        for _ in range(epochs):
            p = self._probs(X)
            g = (onehot - p) / len(X)
            self.W += lr * (X.T @ g)
            self.b += lr * g.sum(axis=0)
        return self

    def predict(self, X):
        return self._probs(np.asarray(X, dtype=np.float64)).argmax(axis=1)


def class_histogram_shift(classifier: SoftmaxClassifier, samples_a, samples_b):
    """Chi-squared test that two generated sets have different class mixes."""
    n_classes = classifier.W.shape[1]
    ca = np.bincount(classifier.predict(samples_a), minlength=n_classes)
    cb = np.bincount(classifier.predict(samples_b), minlength=n_classes)
    table = np.stack([ca, cb])
    table = table[:, table.sum(axis=0) > 0]
    stat, p, _, _ = chi2_contingency(table)
    return float(stat), float(p)
