"""Training engine: importance-weighted bound with a Boltzmann prior.

The per-datum objective with M = K*D latent draws is

    L_{K,D} = mean_d [ log (1/K) sum_k exp(log w_{d,k}) ],
    log w = log p(x|zeta) - kl_weight * (log q(zeta|x) + H(zeta)),

with the prior log partition function omitted: its parameter gradient is
supplied by the sampler's negative phase, and it has no gradient into the
inference networks.  K = 1 reproduces the plain variational bound.
Gradients everywhere are of the objective (ascent); the optimizer adds the
update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import calib as calib_mod
from . import rbm
from .graph import Connectivity, HierarchyMapping, hierarchy_mapping, BIPARTITE
from .latent import log_q, log_q_dlogits
from .nets import (
    DENSE,
    GATED,
    HierEncoder,
    LayerSpec,
    NetStack,
    bernoulli_loglik,
    bernoulli_loglik_dlogits,
)
from .samplers import AnnealerEmulator, PaConfig, PopulationAnnealer


class TrainingDiverged(RuntimeError):
    """Raised when the objective turns non-finite; a checkpoint is flushed first."""


@dataclass
class ArchConfig:
    """Desk-scale dense substitution of the reference layer pattern."""

    input_dim: int
    trunk_widths: tuple = (64,)
    head_width: int = 144
    decoder_widths: tuple = (128,)
    use_batchnorm: bool = True
    dropout_rate: float = 0.2  # decoder stacks only

    def encoder_specs(self, n1: int, n2: int, trunk_out: int):
        trunk = []
        prev = self.input_dim
        for w in self.trunk_widths:
            trunk.append(LayerSpec(GATED, prev, w, use_batchnorm=self.use_batchnorm))
            prev = w
        head1 = [
            LayerSpec(GATED, trunk_out, self.head_width),
            LayerSpec(DENSE, self.head_width, n1),
        ]
        head2 = [
            LayerSpec(GATED, trunk_out + n1, self.head_width),
            LayerSpec(DENSE, self.head_width, n2),
        ]
        return trunk, head1, head2

    def decoder_specs(self, num_nodes: int):
        specs = []
        prev = num_nodes
        for w in self.decoder_widths:
            specs.append(
                LayerSpec(
                    GATED, prev, w,
                    use_batchnorm=self.use_batchnorm,
                    dropout_rate=self.dropout_rate,
                )
            )
            prev = w
        specs.append(LayerSpec(DENSE, prev, self.input_dim))
        return specs


@dataclass
class VaeModel:
    conn: Connectivity
    mapping: HierarchyMapping
    prior: rbm.BmParams
    encoder: HierEncoder
    decoder: NetStack
    tau: float
    prior_gb: np.ndarray = None
    prior_gW: np.ndarray = None

    def __post_init__(self):
        if self.prior_gb is None:
            self.prior_gb = np.zeros_like(self.prior.b)
        if self.prior_gW is None:
            self.prior_gW = np.zeros_like(self.prior.W)

    def parameters(self):
        yield from self.encoder.params()
        yield from self.decoder.params("dec")
        yield "prior.b", self.prior.b, self.prior_gb
        yield "prior.W", self.prior.W, self.prior_gW

    def state_arrays(self):
        yield from self.encoder.state_arrays()
        yield from self.decoder.state_arrays("dec")

    def zero_grads(self):
        self.encoder.zero_grads()
        self.decoder.zero_grads()
        self.prior_gb[:] = 0.0
        self.prior_gW[:] = 0.0

    def set_frozen_stats(self, frozen: bool):
        self.encoder.set_frozen_stats(frozen)
        self.decoder.frozen_stats = frozen


def build_model(conn: Connectivity, arch: ArchConfig, tau: float = 1.0 / 7.0,
                mapping: HierarchyMapping | None = None, seed: int = 0) -> VaeModel:
    rng = np.random.default_rng(seed)
    mapping = mapping if mapping is not None else hierarchy_mapping(conn, BIPARTITE)
    n1, n2 = len(mapping.group1), len(mapping.group2)
    trunk_out = arch.trunk_widths[-1]
    t_specs, h1_specs, h2_specs = arch.encoder_specs(n1, n2, trunk_out)
    encoder = HierEncoder(
        NetStack(t_specs, rng),
        NetStack(h1_specs, rng),
        NetStack(h2_specs, rng),
        mapping,
        conn.num_nodes,
    )
    decoder = NetStack(arch.decoder_specs(conn.num_nodes), rng)
    return VaeModel(conn, mapping, rbm.BmParams.zeros(conn), encoder, decoder, tau)


@dataclass
class ObjectiveOut:
    objective: float
    recon: float
    kl: float
    log_w: np.ndarray  # (batch, D, K)


def objective_and_grads(
    model: VaeModel,
    x: np.ndarray,
    rho: np.ndarray,
    kl_weight: float = 1.0,
    K: int = 1,
    D: int = 1,
    neg_stats: tuple[np.ndarray, np.ndarray] | None = None,
    beta_scale: float = 1.0,
    train: bool = True,
    rng=None,
) -> ObjectiveOut:
    """Evaluate L_{K,D} and (in train mode) accumulate all gradients.

    rho has one row per latent draw: shape (batch * D * K, num_nodes),
    draws for a datum laid out contiguously in (D, K) row-major order.
    beta_scale multiplies only the prior-energy pathway into the encoder
    (the effective-temperature correction); the prior's own gradients
    absorb that scale into the learning rate.
    """
    if K < 1 or D < 1:
        raise ValueError("K and D must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    M = K * D
    if rho.shape != (B * M, model.conn.num_nodes):
        raise ValueError(f"rho must have shape {(B * M, model.conn.num_nodes)}")
    x_rep = np.repeat(x, M, axis=0)

    zeta, cache = model.encoder.encode(x_rep, rho, model.tau, train, rng)
    o = model.decoder.forward(zeta, train, rng)
    recon = bernoulli_loglik(o, x_rep)
    g1, g2 = model.mapping.group1, model.mapping.group2
    lq = log_q(cache["l1"], cache["z1"]) + log_q(cache["l2"], cache["z2"])
    h_zeta = rbm.energy(model.prior, zeta)
    log_w = recon - kl_weight * (lq + h_zeta)
    if np.isnan(log_w).all():
        raise FloatingPointError("all importance weights are NaN")
    log_w_bdk = log_w.reshape(B, D, K)
    lse = logsumexp(log_w_bdk, axis=2) - np.log(K)
    objective = float(lse.mean())

    out = ObjectiveOut(objective, float(recon.mean()), float((lq + h_zeta).mean()), log_w_bdk)
    if not train:
        return out

    # d objective / d log_w: normalized importance weights over K, averaged over (B, D)
    wtilde = np.exp(log_w_bdk - logsumexp(log_w_bdk, axis=2, keepdims=True))
    coef = (wtilde / (B * D)).reshape(B * M, 1)

    g_o = coef * bernoulli_loglik_dlogits(o, x_rep)
    g_zeta = model.decoder.backward(g_o)
    g_zeta += -kl_weight * beta_scale * coef * rbm.energy_grad_z(model.prior, zeta)
    g_zeta[:, g1] += -kl_weight * coef * cache["l1"]
    g_zeta[:, g2] += -kl_weight * coef * cache["l2"]
    g_l1 = -kl_weight * coef * log_q_dlogits(cache["l1"], cache["z1"])
    g_l2 = -kl_weight * coef * log_q_dlogits(cache["l2"], cache["z2"])
    model.encoder.backward(cache, g_zeta, g_l1, g_l2)

    # prior: importance-weighted positive phase minus (plus) the model phase
    w_flat = coef[:, 0]
    model.prior_gb += -kl_weight * (w_flat @ zeta)
    if model.conn.num_edges:
        l, m = model.conn.edges[:, 0], model.conn.edges[:, 1]
        model.prior_gW += -kl_weight * (w_flat @ (zeta[:, l] * zeta[:, m]))
    if neg_stats is not None:
        mean_z, corr = neg_stats
        model.prior_gb += kl_weight * mean_z
        model.prior_gW += kl_weight * corr
    return out


def elbo_terms(x, model, sampler, kl_weight, rng, n_negative=1000, beta_scale=1.0,
               log_z: float | None = None):
    """Single-draw bound split into its autoencoding and KL-like parts.

    Returns (autoencoding term, KL term, negative-phase batch).  The KL
    term includes log Z when an estimate is supplied, else it is the
    energy-plus-entropy part alone.  Gradients accumulate into the model.
    """
    draws = sampler.draw(model.prior, n_negative)
    neg_stats = rbm.grad_energy(model.prior, draws.bits)
    rho = rng.random((np.atleast_2d(x).shape[0], model.conn.num_nodes))
    out = objective_and_grads(
        model, x, rho, kl_weight=kl_weight, K=1, D=1,
        neg_stats=neg_stats, beta_scale=beta_scale, train=True, rng=rng,
    )
    kl_term = out.kl + (log_z if log_z is not None else 0.0)
    return out.recon, kl_term, draws


def iw_objective(x, model, K, D, sampler, rng, n_negative=1000, kl_weight=1.0,
                 beta_scale=1.0):
    """Multi-draw training objective; K*D latent draws per datum."""
    draws = sampler.draw(model.prior, n_negative)
    neg_stats = rbm.grad_energy(model.prior, draws.bits)
    B = np.atleast_2d(x).shape[0]
    rho = rng.random((B * K * D, model.conn.num_nodes))
    out = objective_and_grads(
        model, x, rho, kl_weight=kl_weight, K=K, D=D,
        neg_stats=neg_stats, beta_scale=beta_scale, train=True, rng=rng,
    )
    return out, draws


# ---------------------------------------------------------------------------
# optimizer and schedules


class Adam:
    """Ascent-direction Adam over the model's (name, value, grad) registry."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, value, grad in params:
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            m, v = self.m[name], self.v[name]
            m += (1 - b1) * (grad - m)
            v += (1 - b2) * (grad**2 - v)
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            value += lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr_init: float = 3e-3
    lr_min: float = 1e-4
    lr_decay_epochs: int = 1800
    tau: float = 1.0 / 7.0
    kl_ramp_epochs: int = 200
    kd_schedule: tuple = ((1, 8, 0), (2, 4, 200), (2, 4, 400), (4, 2, 600), (4, 2, 800), (8, 1, 1000))
    neg_samples: int = 1000
    clip_b: float | None = None
    clip_W: float | None = None
    seed: int = 0
    binarize: bool = True
    eval_every: int = 10
    eval_k: int = 100
    eval_subset: int = 512
    calib_enabled: bool = False
    calib_gamma: float = 1e-3
    calib_every: int = 1
    calib_pa: PaConfig = field(default_factory=PaConfig)
    checkpoint_every: int = 0

    def __post_init__(self):
        if any(v <= 0 for v in (self.lr_init, self.lr_min, self.tau, self.batch_size)):
            raise ValueError("rates and sizes must be positive")
        products = {k * d for k, d, _ in self.kd_schedule}
        if len(products) != 1:
            raise ValueError("K*D must stay constant across the schedule")

    def lr_at(self, epoch: int) -> float:
        frac = min(epoch / self.lr_decay_epochs, 1.0)
        return self.lr_init * (self.lr_min / self.lr_init) ** frac

    def kl_weight_at(self, epoch: int) -> float:
        if self.kl_ramp_epochs <= 0:
            return 1.0
        return min(1.0, epoch / self.kl_ramp_epochs)

    def kd_at(self, epoch: int) -> tuple[int, int]:
        k, d = self.kd_schedule[0][:2]
        for kk, dd, start in self.kd_schedule:
            if epoch >= start:
                k, d = kk, dd
        return k, d


@dataclass
class TrainState:
    model: VaeModel
    optimizer: Adam
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    calib: "calib_mod.CalibState | None" = None
    log_z_est: float | None = None
    metrics: list = field(default_factory=list)


def _refresh_log_z(model: VaeModel, rng) -> float:
    """Exact log Z below the enumeration cap, PA estimate above it."""
    if int(model.conn.active_mask.sum()) <= rbm.ENUM_CAP:
        return rbm.exact_log_z(model.prior)
    pa = PopulationAnnealer(PaConfig(), seed=int(rng.integers(2**31)))
    return pa.draw(model.prior, 1).meta["log_z"]


def train(config: TrainConfig, dataset, sampler, model: VaeModel | None = None,
          arch: ArchConfig | None = None, conn: Connectivity | None = None,
          mapping: HierarchyMapping | None = None,
          metrics_writer=None, checkpoint_cb=None) -> TrainState:
    """Full training loop; returns the final state with its metric stream.

    `dataset` provides x_train/x_val as [0,1] arrays.  `sampler` is any
    backend with draw(params, n).  Divergence (non-finite objective)
    flushes a checkpoint through checkpoint_cb and raises TrainingDiverged;
    a keyboard interrupt also flushes before unwinding.
    """
    if model is None:
        if arch is None or conn is None:
            raise ValueError("pass either a model or (arch, conn)")
        model = build_model(conn, arch, tau=config.tau, mapping=mapping, seed=config.seed)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_data, rng_rho, rng_bin, rng_eval = (np.random.default_rng(s) for s in seeds)
    state = TrainState(model, Adam(), config)
    if config.calib_enabled:
        if not isinstance(sampler, AnnealerEmulator):
            raise ValueError("calibration requires the emulator backend")
        state.calib = calib_mod.CalibState(beta_eff=sampler.cfg.beta0, gamma=config.calib_gamma)

    x_train = np.asarray(dataset.x_train, dtype=np.float64)
    n_train = len(x_train)
    beta_scale = 1.0

    try:
        _train_epochs(
            config, dataset, sampler, state, model, x_train, n_train, beta_scale,
            rng_data, rng_rho, rng_bin, rng_eval, metrics_writer, checkpoint_cb,
        )
    except KeyboardInterrupt:
        if checkpoint_cb is not None:
            checkpoint_cb(state)  # interrupt-safe flush before unwinding
        raise
    return state


def _train_epochs(config, dataset, sampler, state, model, x_train, n_train, beta_scale,
                  rng_data, rng_rho, rng_bin, rng_eval, metrics_writer, checkpoint_cb):
    from . import evaluation

    aux_sampler = None
    if state.calib is not None:
        aux_sampler = PopulationAnnealer(config.calib_pa, seed=config.seed + 9173)

    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = config.lr_at(epoch)
        klw = config.kl_weight_at(epoch)
        K, D = config.kd_at(epoch)
        order = rng_data.permutation(n_train)
        epoch_obj, epoch_recon, epoch_kl, n_batches = 0.0, 0.0, 0.0, 0
        sampler_events = 0
        sampler_beta = None
        for start in range(0, n_train - config.batch_size + 1, config.batch_size):
            xb = x_train[order[start : start + config.batch_size]]
            if config.binarize:
                xb = (rng_bin.random(xb.shape) < xb).astype(np.float64)
            draws = sampler.draw(model.prior, config.neg_samples)
            neg_stats = rbm.grad_energy(model.prior, draws.bits)
            sampler_events += int(draws.meta.get("clamp_events", 0))
            sampler_beta = draws.meta.get("beta_actual", sampler_beta)
            if state.calib is not None and state.step % config.calib_every == 0:
                ising = rbm.to_ising(model.prior, sampler.cfg.beta0)
                aux_params = rbm.from_ising(
                    rbm.IsingView(model.conn, ising.h, ising.J, state.calib.beta_eff)
                )
                aux = aux_sampler.draw(aux_params, config.neg_samples)
                calib_mod.update_beta(state.calib, ising, draws, aux)
                beta_scale = state.calib.beta_eff / sampler.cfg.beta0
            rho = rng_rho.random((len(xb) * K * D, model.conn.num_nodes))
            model.zero_grads()
            try:
                out = objective_and_grads(
                    model, xb, rho, kl_weight=klw, K=K, D=D,
                    neg_stats=neg_stats, beta_scale=beta_scale, train=True, rng=rng_rho,
                )
                diverged = not np.isfinite(out.objective)
            except FloatingPointError as err:
                out, diverged = err, True
            if diverged:
                if checkpoint_cb is not None:
                    checkpoint_cb(state)
                raise TrainingDiverged(f"non-finite loss at step {state.step}: {out}")
            state.optimizer.step(model.parameters(), lr)
            if config.clip_b is not None:
                np.clip(model.prior.b, -config.clip_b, config.clip_b, out=model.prior.b)
            if config.clip_W is not None:
                np.clip(model.prior.W, -config.clip_W, config.clip_W, out=model.prior.W)
            epoch_obj += out.objective
            epoch_recon += out.recon
            epoch_kl += out.kl
            n_batches += 1
            state.step += 1

        record = {
            "epoch": epoch,
            "step": state.step,
            "objective": epoch_obj / max(n_batches, 1),
            "recon": epoch_recon / max(n_batches, 1),
            "kl": epoch_kl / max(n_batches, 1),
            "lr": lr,
            "kl_weight": klw,
            "K": K,
            "D": D,
            "w_l1": float(np.abs(model.prior.W).sum()),
            "beta_eff": state.calib.beta_eff if state.calib else 1.0,
            "sampler_events": sampler_events,
            "sampler_beta": sampler_beta,
            "elbo": None,
            "iw_ll": None,
            "active_units": None,
        }
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
            state.log_z_est = _refresh_log_z(model, rng_eval)
            record["elbo"] = record["objective"] - config.kl_weight_at(epoch) * state.log_z_est
            xv = np.asarray(dataset.x_val, dtype=np.float64)[: config.eval_subset]
            if len(xv):
                xv_bin = (rng_eval.random(xv.shape) < xv).astype(np.float64) if config.binarize else xv
                ll, _ = evaluation.log_likelihood(
                    model, xv_bin, config.eval_k, state.log_z_est, 0.0, rng_eval
                )
                record["iw_ll"] = ll
                record["active_units"] = evaluation.active_units(model, xv_bin, rng_eval)
        state.metrics.append(record)
        if metrics_writer is not None:
            metrics_writer(record)
        if config.checkpoint_every and checkpoint_cb is not None:
            if (epoch + 1) % config.checkpoint_every == 0:
                checkpoint_cb(state)
    return state
