"""Negative-phase samplers behind a single black-box draw() interface.

Backends: exact enumeration (small instances), block Gibbs, persistent
chains, population annealing (which also yields a log-partition-function
estimate), and an emulated noisy annealer parameterized directly by an
effective inverse temperature with drift and per-programming control error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from . import rbm
from .graph import Connectivity
from .rbm import BmParams, IsingView

SOURCE_GIBBS = "gibbs"
SOURCE_PCD = "pcd"
SOURCE_PA = "pa"
SOURCE_EMULATOR = "emulator"
SOURCE_EXACT = "exact"

MULTINOMIAL = "multinomial"
SYSTEMATIC = "systematic"


class SamplerError(RuntimeError):
    pass


class PopulationCollapseError(SamplerError):
    """Effective sample size fell below 2 during a reweighting step."""


@dataclass
class SampleBatch:
    """Binary latent configurations plus optional log-Z metadata."""

    bits: np.ndarray
    source: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        bits = np.atleast_2d(np.asarray(self.bits, dtype=np.float64))
        if bits.shape[0] < 1:
            raise ValueError("need at least one sample")
        if not np.isin(bits, (0.0, 1.0)).all():
            raise ValueError("sample entries must be exactly 0 or 1")
        self.bits = bits

    @property
    def n_samples(self) -> int:
        return self.bits.shape[0]


@dataclass
class PaConfig:
    """Population annealing schedule: ladder from beta=0 to beta=1."""

    population: int = 1024
    beta_ladder: np.ndarray = None
    sweeps_per_step: int = 5
    resample: str = SYSTEMATIC

    def __post_init__(self):
        if self.beta_ladder is None:
            self.beta_ladder = np.linspace(0.0, 1.0, 65)
        self.beta_ladder = np.asarray(self.beta_ladder, dtype=np.float64)
        lad = self.beta_ladder
        if len(lad) < 2 or lad[0] != 0.0 or lad[-1] != 1.0 or np.any(np.diff(lad) <= 0):
            raise ValueError("ladder must increase strictly from 0 to 1")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.resample not in (MULTINOMIAL, SYSTEMATIC):
            raise ValueError(f"unknown resampling scheme {self.resample!r}")


@dataclass
class EmulatorConfig:
    """Noisy-annealer emulation knobs.

    beta0 is the nominal inverse temperature the parameters are programmed
    for; the actual sampling temperature wanders around it with a
    mean-reverting drift.  sigma_h/sigma_J are per-programming Gaussian
    control errors on the gauged parameters, which are then clamped to the
    device range.  Each call collects n_transforms gauges times
    reads_per_transform reads.
    """

    beta0: float = 1.0
    drift_amplitude: float = 0.0
    drift_timescale: float = 50.0
    sigma_h: float = 0.0
    sigma_J: float = 0.0
    range_h: float = 2.0
    range_J: float = 1.0
    n_transforms: int = 5
    reads_per_transform: int = 200
    equilibration_sweeps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.beta0 <= 0 or self.drift_timescale <= 0:
            raise ValueError("beta0 and drift_timescale must be positive")
        if min(self.sigma_h, self.sigma_J, self.drift_amplitude) < 0:
            raise ValueError("noise amplitudes must be non-negative")
        if self.range_h <= 0 or self.range_J <= 0:
            raise ValueError("ranges must be positive")


# Presets loosely ordered by control-error magnitude; "baseline" is the
# noisiest device profile and "noiseless" is the oracle-test profile.
EMULATOR_PRESETS = {
    "noiseless": EmulatorConfig(),
    "low-noise": EmulatorConfig(sigma_h=0.008, sigma_J=0.008, drift_amplitude=0.004),
    "interim": EmulatorConfig(sigma_h=0.02, sigma_J=0.02, drift_amplitude=0.008),
    "baseline": EmulatorConfig(sigma_h=0.05, sigma_J=0.05, drift_amplitude=0.015),
}


def emulator_preset(name: str, **overrides) -> EmulatorConfig:
    if name not in EMULATOR_PRESETS:
        raise ValueError(f"unknown emulator preset {name!r}")
    return replace(EMULATOR_PRESETS[name], **overrides)


# ---------------------------------------------------------------------------
# block Gibbs


def random_state(conn: Connectivity, n: int, rng) -> np.ndarray:
    """Uniform random bits on active nodes, zeros elsewhere."""
    bits = np.zeros((n, conn.num_nodes))
    active = conn.active_nodes
    bits[:, active] = (rng.random((n, len(active))) < 0.5).astype(np.float64)
    return bits


def _sweep_bits(bits: np.ndarray, b: np.ndarray, Wsym: np.ndarray, classes, rng) -> None:
    """One full sweep in place: each color block from its exact conditional."""
    for nodes in classes:
        if not len(nodes):
            continue
        local = b[nodes] + bits @ Wsym[:, nodes]
        p1 = expit(-local)
        bits[:, nodes] = (rng.random(p1.shape) < p1).astype(np.float64)


def block_gibbs_sweep(params: BmParams, state: SampleBatch, rng) -> SampleBatch:
    """Update every active unit once, color class by color class."""
    bits = state.bits.copy()
    if bits.shape[1] != params.conn.num_nodes:
        raise ValueError("state width does not match the graph")
    _sweep_bits(bits, params.b, params.coupling_matrix(), params.conn.color_classes(), rng)
    return SampleBatch(bits, SOURCE_GIBBS, dict(state.meta))


def pcd_draw(params: BmParams, persistent: SampleBatch, k_sweeps: int, rng) -> SampleBatch:
    """Advance persistent chains by k sweeps; chains carry across steps."""
    bits = persistent.bits.copy()
    if bits.shape[1] != params.conn.num_nodes:
        raise ValueError("state width does not match the graph")
    Wsym = params.coupling_matrix()
    classes = params.conn.color_classes()
    for _ in range(k_sweeps):
        _sweep_bits(bits, params.b, Wsym, classes, rng)
    return SampleBatch(bits, SOURCE_PCD, dict(persistent.meta))


# ---------------------------------------------------------------------------
# population annealing


def _systematic_resample(weights: np.ndarray, rng) -> np.ndarray:
    pop = len(weights)
    positions = (rng.random() + np.arange(pop)) / pop
    return np.searchsorted(np.cumsum(weights), positions).clip(max=pop - 1)


def population_annealing(params: BmParams, cfg: PaConfig, rng) -> SampleBatch:
    """Anneal a population from beta=0 to beta=1, reweighting at each rung.

    The log-Z estimate accumulates the stepwise log-mean weights on top of
    the exact beta=0 value (n_active * log 2).  The bootstrap standard
    error resamples the per-step weight vectors independently, which
    neglects the correlation introduced by resampling and should be read
    as a lower-bound error bar.
    """
    conn = params.conn
    n_active = int(conn.active_mask.sum())
    bits = random_state(conn, cfg.population, rng)
    classes = conn.color_classes()
    log_z = n_active * np.log(2.0)
    step_logw = []
    for beta_prev, beta in zip(cfg.beta_ladder[:-1], cfg.beta_ladder[1:]):
        logw = -(beta - beta_prev) * rbm.energy(params, bits)
        step_logw.append(logw)
        log_z += logsumexp(logw) - np.log(cfg.population)
        norm = np.exp(logw - logsumexp(logw))
        ess = 1.0 / np.sum(norm**2)
        if ess < 2.0:
            raise PopulationCollapseError(
                f"effective sample size {ess:.2f} < 2 at beta {beta:.4f}"
            )
        if cfg.resample == SYSTEMATIC:
            idx = _systematic_resample(norm, rng)
        else:
            idx = rng.choice(cfg.population, size=cfg.population, p=norm)
        bits = bits[idx]
        scaled = BmParams(conn, beta * params.b, beta * params.W)
        Wsym = scaled.coupling_matrix()
        for _ in range(cfg.sweeps_per_step):
            _sweep_bits(bits, scaled.b, Wsym, classes, rng)
    boot = np.empty(100)
    for i in range(100):
        total = n_active * np.log(2.0)
        for logw in step_logw:
            pick = rng.integers(0, len(logw), size=len(logw))
            total += logsumexp(logw[pick]) - np.log(len(logw))
        boot[i] = total
    meta = {"log_z": float(log_z), "log_z_err": float(boot.std()), "steps": len(step_logw)}
    return SampleBatch(bits, SOURCE_PA, meta)


# ---------------------------------------------------------------------------
# sampler objects (uniform draw interface)


def _indices_to_bits(idx: np.ndarray, n: int) -> np.ndarray:
    return ((np.asarray(idx, dtype=np.uint64)[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(
        np.float64
    )


def _exact_bits(params: BmParams, n: int, rng) -> np.ndarray:
    """Exact draws from the Boltzmann distribution via the state table."""
    p = rbm.exact_distribution(params)
    active = params.conn.active_nodes
    idx = rng.choice(len(p), size=n, p=p)
    bits = np.zeros((n, params.conn.num_nodes))
    bits[:, active] = _indices_to_bits(idx, len(active))
    return bits


class ExactSampler:
    """Unbiased reference backend (enumeration, <= 20 active units)."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def draw(self, params: BmParams, n: int) -> SampleBatch:
        return SampleBatch(_exact_bits(params, n, self.rng), SOURCE_EXACT)


class GibbsSampler:
    """Fresh block-Gibbs chains, n_sweeps from a uniform start per draw."""

    def __init__(self, n_sweeps=100, seed=0):
        self.n_sweeps = n_sweeps
        self.rng = np.random.default_rng(seed)

    def draw(self, params: BmParams, n: int) -> SampleBatch:
        bits = random_state(params.conn, n, self.rng)
        Wsym = params.coupling_matrix()
        classes = params.conn.color_classes()
        for _ in range(self.n_sweeps):
            _sweep_bits(bits, params.b, Wsym, classes, self.rng)
        return SampleBatch(bits, SOURCE_GIBBS)


class PcdSampler:
    """Persistent chains advanced k sweeps per draw."""

    def __init__(self, k_sweeps=5, seed=0):
        self.k_sweeps = k_sweeps
        self.rng = np.random.default_rng(seed)
        self._chains: SampleBatch | None = None

    def draw(self, params: BmParams, n: int) -> SampleBatch:
        if self._chains is None or self._chains.bits.shape != (n, params.conn.num_nodes):
            self._chains = SampleBatch(random_state(params.conn, n, self.rng), SOURCE_PCD)
        self._chains = pcd_draw(params, self._chains, self.k_sweeps, self.rng)
        return self._chains


class PopulationAnnealer:
    """Full PA run per draw; meta carries the log-Z estimate."""

    def __init__(self, cfg: PaConfig | None = None, seed=0):
        self.cfg = cfg or PaConfig()
        self.rng = np.random.default_rng(seed)

    def draw(self, params: BmParams, n: int) -> SampleBatch:
        batch = population_annealing(params, self.cfg, self.rng)
        if n < batch.n_samples:
            pick = self.rng.choice(batch.n_samples, size=n, replace=False)
            return SampleBatch(batch.bits[pick], SOURCE_PA, batch.meta)
        if n > batch.n_samples:
            pick = self.rng.integers(0, batch.n_samples, size=n)
            return SampleBatch(batch.bits[pick], SOURCE_PA, batch.meta)
        return batch


class AnnealerEmulator:
    """Software stand-in for a hardware Boltzmann sampler.

    Parameters are programmed in spin convention at the nominal beta0; the
    device actually samples from the classical Boltzmann distribution at a
    hidden, drifting beta.  Each draw applies spin-reversal gauges, fresh
    Gaussian control error, and range clamping before sampling, and the
    drift advances once per call.
    """

    def __init__(self, cfg: EmulatorConfig, beta_start: float | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.beta = cfg.beta0 if beta_start is None else beta_start
        self.beta_history: list[float] = []

    def _advance_drift(self):
        cfg = self.cfg
        self.beta += (cfg.beta0 - self.beta) / cfg.drift_timescale
        if cfg.drift_amplitude > 0:
            self.beta += cfg.drift_amplitude * self.rng.standard_normal()
        self.beta = max(self.beta, 1e-3)

    def draw(self, params: BmParams, n: int | None = None) -> SampleBatch:
        cfg = self.cfg
        if n is None:
            n = cfg.n_transforms * cfg.reads_per_transform
        self._advance_drift()
        self.beta_history.append(self.beta)
        view = rbm.to_ising(params, cfg.beta0)
        conn = params.conn
        active = conn.active_nodes
        clamped = 0
        reads = np.full(cfg.n_transforms, n // cfg.n_transforms)
        reads[: n % cfg.n_transforms] += 1
        chunks = []
        for n_reads in reads:
            if n_reads == 0:
                continue
            gauge = np.ones(conn.num_nodes)
            gauge[active] = self.rng.choice((-1.0, 1.0), size=len(active))
            h = gauge * view.h
            J = view.J
            if conn.num_edges:
                J = gauge[conn.edges[:, 0]] * gauge[conn.edges[:, 1]] * J
            if cfg.sigma_h > 0:
                h = h + np.where(conn.active_mask, cfg.sigma_h * self.rng.standard_normal(h.shape), 0.0)
            if cfg.sigma_J > 0 and len(J):
                J = J + cfg.sigma_J * self.rng.standard_normal(J.shape)
            h_c = np.clip(h, -cfg.range_h, cfg.range_h)
            J_c = np.clip(J, -cfg.range_J, cfg.range_J)
            clamped += int(np.sum(h_c != h) + np.sum(J_c != J))
            programmed = rbm.from_ising(IsingView(conn, h_c, J_c, self.beta))
            if len(active) <= rbm.ENUM_CAP:
                bits = _exact_bits(programmed, int(n_reads), self.rng)
            else:
                bits = random_state(conn, int(n_reads), self.rng)
                Wsym = programmed.coupling_matrix()
                classes = conn.color_classes()
                for _ in range(cfg.equilibration_sweeps):
                    _sweep_bits(bits, programmed.b, Wsym, classes, self.rng)
            flip = gauge < 0
            bits[:, flip] = 1.0 - bits[:, flip]
            bits[:, ~conn.active_mask] = 0.0
            chunks.append(bits)
        meta = {"beta_actual": float(self.beta), "clamp_events": clamped}
        return SampleBatch(np.concatenate(chunks, axis=0), SOURCE_EMULATOR, meta)


def emulator_draw(params: BmParams, cfg: EmulatorConfig, n: int) -> SampleBatch:
    """One-shot draw from a freshly initialized emulator."""
    return AnnealerEmulator(cfg).draw(params, n)


def make_sampler(backend: str, seed: int = 0, **kwargs):
    """Factory for the uniform draw(params, n) interface."""
    if backend == SOURCE_EXACT:
        return ExactSampler(seed=seed)
    if backend == SOURCE_GIBBS:
        return GibbsSampler(seed=seed, **kwargs)
    if backend == SOURCE_PCD:
        return PcdSampler(seed=seed, **kwargs)
    if backend == SOURCE_PA:
        return PopulationAnnealer(seed=seed, **kwargs)
    if backend == SOURCE_EMULATOR:
        preset = kwargs.pop("preset", "noiseless")
        overrides = dict(kwargs)
        overrides.setdefault("seed", seed)
        return AnnealerEmulator(emulator_preset(preset, **overrides))
    raise ValueError(f"unknown sampler backend {backend!r}")
