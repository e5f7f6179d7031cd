"""Dense and gated-dense stacks with exact hand-written gradients.

Layers cache activations on the training-mode forward pass and accumulate
parameter gradients on backward.  Batch normalization supports a
frozen-stats mode (running statistics used even in training mode) so that
per-parameter finite differences stay well defined during gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .graph import HierarchyMapping
from .latent import hard_sample_from_logits, smooth_sample, smooth_sample_dlogits, softplus

DENSE = "dense"
GATED = "gated"


@dataclass
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    use_batchnorm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in (DENSE, GATED):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def _init_weight(rng, in_dim, out_dim):
    r = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-r, r, size=(in_dim, out_dim))


class _BatchNorm:
    """Per-feature normalization with trainable scale/shift."""

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.g_gamma = np.zeros(dim)
        self.g_beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x, train, frozen_stats):
        use_batch = train and not frozen_stats
        if use_batch:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        if train:
            self._cache = (xhat, inv_std, use_batch)
        return self.gamma * xhat + self.beta

    def backward(self, g):
        xhat, inv_std, use_batch = self._cache
        self.g_gamma += (g * xhat).sum(axis=0)
        self.g_beta += g.sum(axis=0)
        gx_hat = g * self.gamma
        if not use_batch:
            return gx_hat * inv_std
        B = g.shape[0]
        return (inv_std / B) * (
            B * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0)
        )

    def params(self, prefix):
        yield f"{prefix}.gamma", self.gamma, self.g_gamma
        yield f"{prefix}.beta", self.beta, self.g_beta

    def state_arrays(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class DenseLayer:
    """Affine map y = x W + b (logit/output layers)."""

    def __init__(self, spec: LayerSpec, rng):
        self.spec = spec
        self.W = _init_weight(rng, spec.in_dim, spec.out_dim)
        self.b = np.zeros(spec.out_dim)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train, rng, frozen_stats):
        if x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected input dim {self.spec.in_dim}, got {x.shape[1]}")
        if train:
            self._x = x
        return x @ self.W + self.b

    def backward(self, g):
        self.gW += self._x.T @ g
        self.gb += g.sum(axis=0)
        return g @ self.W.T

    def params(self, prefix):
        yield f"{prefix}.W", self.W, self.gW
        yield f"{prefix}.b", self.b, self.gb

    def state_arrays(self, prefix):
        return iter(())


class GatedDenseLayer:
    """linear to 2f -> batch norm -> split -> sigmoid gate -> product -> ReLU -> dropout."""

    def __init__(self, spec: LayerSpec, rng):
        self.spec = spec
        f = spec.out_dim
        self.W = _init_weight(rng, spec.in_dim, 2 * f)
        self.b = np.zeros(2 * f)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self.bn = _BatchNorm(2 * f) if spec.use_batchnorm else None
        self._cache = None

    def forward(self, x, train, rng, frozen_stats):
        if x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected input dim {self.spec.in_dim}, got {x.shape[1]}")
        f = self.spec.out_dim
        y = x @ self.W + self.b
        if self.bn is not None:
            y = self.bn.forward(y, train, frozen_stats)
        a, gate_pre = y[:, :f], y[:, f:]
        gate = expit(gate_pre)
        prod = a * gate
        out = np.maximum(prod, 0.0)
        mask = None
        if train and self.spec.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training a dropout layer needs an rng")
            keep = 1.0 - self.spec.dropout_rate
            mask = (rng.random(out.shape) < keep) / keep
            out = out * mask
        if train:
            self._cache = (x, a, gate, prod, mask)
        return out

    def backward(self, g):
        x, a, gate, prod, mask = self._cache
        if mask is not None:
            g = g * mask
        g = g * (prod > 0.0)
        ga = g * gate
        ggate = g * a * gate * (1.0 - gate)
        gy = np.concatenate([ga, ggate], axis=1)
        if self.bn is not None:
            gy = self.bn.backward(gy)
        self.gW += x.T @ gy
        self.gb += gy.sum(axis=0)
        return gy @ self.W.T

    def params(self, prefix):
        yield f"{prefix}.W", self.W, self.gW
        yield f"{prefix}.b", self.b, self.gb
        if self.bn is not None:
            yield from self.bn.params(f"{prefix}.bn")

    def state_arrays(self, prefix):
        if self.bn is not None:
            yield from self.bn.state_arrays(f"{prefix}.bn")


def _make_layer(spec: LayerSpec, rng):
    return DenseLayer(spec, rng) if spec.kind == DENSE else GatedDenseLayer(spec, rng)


class NetStack:
    """Ordered layer sequence with shared train/eval and gradient plumbing."""

    def __init__(self, specs: list[LayerSpec], rng, frozen_stats=False):
        self.specs = list(specs)
        self.layers = [_make_layer(s, rng) for s in self.specs]
        self.frozen_stats = frozen_stats
        self._forward_done = False

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    def forward(self, x, train: bool, rng=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for layer in self.layers:
            x = layer.forward(x, train, rng, self.frozen_stats)
            if not np.isfinite(x).all():
                raise FloatingPointError("non-finite activations")
        self._forward_done = train
        return x

    def backward(self, g):
        if not self._forward_done:
            raise RuntimeError("backward called without a training-mode forward")
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.params(f"{prefix}.{i}")

    def state_arrays(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.state_arrays(f"{prefix}.{i}")

    def zero_grads(self):
        for _, _, grad in self.params("x"):
            grad[:] = 0.0


class HierEncoder:
    """Two-level conditional encoder over a latent-group mapping.

    The trunk maps the input to shared features; head1 emits logits for
    group 1, whose smoothed sample joins the features as input to head2.
    """

    def __init__(self, trunk: NetStack, head1: NetStack, head2: NetStack,
                 mapping: HierarchyMapping, num_nodes: int):
        if head1.out_dim != len(mapping.group1) or head2.out_dim != len(mapping.group2):
            raise ValueError("head widths must match the hierarchy group sizes")
        if head2.in_dim != trunk.out_dim + len(mapping.group1):
            raise ValueError("head2 must consume trunk features plus group-1 samples")
        self.trunk = trunk
        self.head1 = head1
        self.head2 = head2
        self.mapping = mapping
        self.num_nodes = num_nodes

    def encode(self, x, rho, tau, train: bool, rng=None, hard=False):
        """Returns the assembled full-width sample and the per-head cache."""
        g1, g2 = self.mapping.group1, self.mapping.group2
        feat = self.trunk.forward(x, train, rng)
        l1 = self.head1.forward(feat, train, rng)
        rho1, rho2 = rho[:, g1], rho[:, g2]
        z1 = hard_sample_from_logits(l1, rho1) if hard else smooth_sample(l1, rho1, tau)
        u2 = np.concatenate([feat, z1], axis=1)
        l2 = self.head2.forward(u2, train, rng)
        z2 = hard_sample_from_logits(l2, rho2) if hard else smooth_sample(l2, rho2, tau)
        zeta = np.zeros((x.shape[0], self.num_nodes))
        zeta[:, g1] = z1
        zeta[:, g2] = z2
        cache = {"feat": feat, "l1": l1, "z1": z1, "l2": l2, "z2": z2, "tau": tau}
        return zeta, cache

    def backward(self, cache, g_zeta, g_l1_direct=None, g_l2_direct=None):
        """Backpropagate gradients w.r.t. the full smoothed sample and logits."""
        g1, g2 = self.mapping.group1, self.mapping.group2
        tau = cache["tau"]
        g_z2 = g_zeta[:, g2]
        g_l2 = g_z2 * smooth_sample_dlogits(cache["z2"], tau)
        if g_l2_direct is not None:
            g_l2 = g_l2 + g_l2_direct
        g_u2 = self.head2.backward(g_l2)
        n_feat = cache["feat"].shape[1]
        g_feat = g_u2[:, :n_feat]
        g_z1 = g_zeta[:, g1] + g_u2[:, n_feat:]
        g_l1 = g_z1 * smooth_sample_dlogits(cache["z1"], tau)
        if g_l1_direct is not None:
            g_l1 = g_l1 + g_l1_direct
        g_feat = g_feat + self.head1.backward(g_l1)
        return self.trunk.backward(g_feat)

    def params(self):
        yield from self.trunk.params("enc.trunk")
        yield from self.head1.params("enc.head1")
        yield from self.head2.params("enc.head2")

    def state_arrays(self):
        yield from self.trunk.state_arrays("enc.trunk")
        yield from self.head1.state_arrays("enc.head1")
        yield from self.head2.state_arrays("enc.head2")

    def zero_grads(self):
        self.trunk.zero_grads()
        self.head1.zero_grads()
        self.head2.zero_grads()

    def set_frozen_stats(self, frozen: bool):
        for stack in (self.trunk, self.head1, self.head2):
            stack.frozen_stats = frozen


def bernoulli_loglik(pixel_logits, x) -> np.ndarray:
    """Per-example sum of x log s(o) + (1-x) log(1-s(o)), stable form."""
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("targets must lie in [0, 1]")
    o = np.asarray(pixel_logits, dtype=np.float64)
    return (x * o - softplus(o)).sum(axis=-1)


def bernoulli_loglik_dlogits(pixel_logits, x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) - expit(np.asarray(pixel_logits, dtype=np.float64))
