"""Boltzmann-machine energies, exact small-instance oracles, and the spin bridge.

Latent units take values in {0, 1} on the VAE side, with energy

    H(z) = sum_l b_l z_l + sum_{(l,m) in edges} W_lm z_l z_m

and distribution p(z) = exp(-H(z)) / Z.  The annealer side works with
{-1,+1} spins at an effective inverse temperature; `to_ising`/`from_ising`
is the exact affine parameter map between the two conventions, so the two
Boltzmann distributions coincide after relabeling z = (s + 1) / 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .graph import Connectivity

ENUM_CAP = 20  # 2^20 states enumerate in seconds; all oracle needs fit below this
QBM_CAP = 12

_CHUNK_BITS = 16


class SizeCapError(ValueError):
    pass


@dataclass
class BmParams:
    """Biases and couplings of the latent Boltzmann machine ({0,1} units)."""

    conn: Connectivity
    b: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.b.shape != (self.conn.num_nodes,):
            raise ValueError("bias length != num_nodes")
        if self.W.shape != (self.conn.num_edges,):
            raise ValueError("coupling length != num_edges")
        inactive = ~self.conn.active_mask
        if inactive.any() and np.any(self.b[inactive] != 0.0):
            raise ValueError("inactive nodes must carry zero bias")

    @staticmethod
    def zeros(conn: Connectivity) -> "BmParams":
        return BmParams(conn, np.zeros(conn.num_nodes), np.zeros(conn.num_edges))

    def copy(self) -> "BmParams":
        return BmParams(self.conn, self.b.copy(), self.W.copy())

    def coupling_matrix(self) -> np.ndarray:
        """Dense symmetric coupling matrix (zeros off the edge set)."""
        n = self.conn.num_nodes
        M = np.zeros((n, n))
        if self.conn.num_edges:
            l, m = self.conn.edges[:, 0], self.conn.edges[:, 1]
            M[l, m] = self.W
            M[m, l] = self.W
        return M


@dataclass
class IsingView:
    """Spin-convention parameters (h, J) at inverse temperature beta_eff."""

    conn: Connectivity
    h: np.ndarray
    J: np.ndarray
    beta_eff: float

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.J = np.asarray(self.J, dtype=np.float64)
        if self.beta_eff <= 0:
            raise ValueError("beta_eff must be positive")


@dataclass
class QbmConfig:
    """Uniform transverse field and the exact-diagonalization size cap."""

    gamma: float
    max_units: int = QBM_CAP

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.max_units > QBM_CAP:
            raise ValueError(f"dense diagonalization capped at {QBM_CAP} units")


def _check_batch(params: BmParams, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != params.conn.num_nodes:
        raise ValueError(f"state width {z.shape[1]} != num_nodes {params.conn.num_nodes}")
    if not np.isfinite(z).all():
        raise ValueError("non-finite entries in state batch")
    return z


def energy(params: BmParams, z) -> np.ndarray:
    """Batched H(z); accepts discrete z or smoothed values in [0, 1]."""
    z = _check_batch(params, z)
    e = z @ params.b
    if params.conn.num_edges:
        l, m = params.conn.edges[:, 0], params.conn.edges[:, 1]
        e = e + (z[:, l] * z[:, m]) @ params.W
    return e


def energy_grad_z(params: BmParams, z) -> np.ndarray:
    """dH/dz_l = b_l + sum_m W_lm z_m, batched."""
    z = _check_batch(params, z)
    return params.b + z @ params.coupling_matrix()


def grad_energy(params: BmParams, z) -> tuple[np.ndarray, np.ndarray]:
    """Batch-averaged sufficient statistics (<z_l>, <z_l z_m>) = dH/d(b, W)."""
    z = _check_batch(params, z)
    gb = z.mean(axis=0)
    if params.conn.num_edges:
        l, m = params.conn.edges[:, 0], params.conn.edges[:, 1]
        gW = (z[:, l] * z[:, m]).mean(axis=0)
    else:
        gW = np.zeros(0)
    return gb, gW


def spin_energy(view: IsingView, spins) -> np.ndarray:
    """Bare H_{h,J}(s) = sum h_l s_l + sum J_lm s_l s_m on {-1,+1} spins."""
    spins = np.atleast_2d(np.asarray(spins, dtype=np.float64))
    e = spins @ view.h
    if view.conn.num_edges:
        l, m = view.conn.edges[:, 0], view.conn.edges[:, 1]
        e = e + (spins[:, l] * spins[:, m]) @ view.J
    return e


# ---------------------------------------------------------------------------
# exact enumeration oracles (active subgraph, n <= ENUM_CAP)


def _active_subproblem(params: BmParams):
    """Restrict (b, W, edges) to active nodes, reindexed 0..n_active-1."""
    conn = params.conn
    active = conn.active_nodes
    remap = -np.ones(conn.num_nodes, dtype=np.int64)
    remap[active] = np.arange(len(active))
    if conn.num_edges:
        keep = conn.active_mask[conn.edges[:, 0]] & conn.active_mask[conn.edges[:, 1]]
        edges = remap[conn.edges[keep]]
        W = params.W[keep]
    else:
        edges = np.empty((0, 2), dtype=np.int64)
        W = np.zeros(0)
    return active, params.b[active], W, edges


_STATE_CACHE: dict[int, np.ndarray] = {}


def bit_states(n: int, offset: int = 0, count: int | None = None) -> np.ndarray:
    """Rows are the binary expansions of offset..offset+count-1 (bit l = unit l).

    Full tables up to 2^16 rows are cached; samplers hit them every call.
    """
    if count is None:
        count = 1 << n
    if offset == 0 and count == (1 << n) and n <= _CHUNK_BITS:
        if n not in _STATE_CACHE:
            idx = np.arange(count, dtype=np.uint64)
            table = ((idx[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(np.float64)
            table.setflags(write=False)
            _STATE_CACHE[n] = table
        return _STATE_CACHE[n]
    idx = np.arange(offset, offset + count, dtype=np.uint64)
    return ((idx[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(np.float64)


_PAIR_CACHE: dict[tuple, np.ndarray] = {}


def _pair_table(n: int, edges: np.ndarray) -> np.ndarray:
    """Cached (2^n, E) table of z_l z_m over the full state enumeration.

    Samplers re-enumerate the same small graph thousands of times; caching
    the pair products turns each pass into two matmuls.
    """
    key = (n, edges.tobytes())
    if key not in _PAIR_CACHE:
        if len(_PAIR_CACHE) > 4:
            _PAIR_CACHE.pop(next(iter(_PAIR_CACHE)))
        z = bit_states(n)
        table = z[:, edges[:, 0]] * z[:, edges[:, 1]]
        table.setflags(write=False)
        _PAIR_CACHE[key] = table
    return _PAIR_CACHE[key]


def _enum_energies(b: np.ndarray, W: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Energies of all 2^n states, chunked to bound peak memory."""
    n = len(b)
    if n > ENUM_CAP:
        raise SizeCapError(f"{n} active units exceeds the enumeration cap {ENUM_CAP}")
    total = 1 << n
    if n <= _CHUNK_BITS:
        e = bit_states(n) @ b
        if len(edges):
            e = e + _pair_table(n, edges) @ W
        return e
    chunk = 1 << _CHUNK_BITS
    out = np.empty(total)
    for start in range(0, total, chunk):
        z = bit_states(n, start, min(chunk, total - start))
        e = z @ b
        if len(edges):
            e = e + (z[:, edges[:, 0]] * z[:, edges[:, 1]]) @ W
        out[start : start + len(z)] = e
    return out


def exact_log_z(params: BmParams) -> float:
    """log Z by stabilized enumeration over the active subgraph."""
    _, b, W, edges = _active_subproblem(params)
    return float(logsumexp(-_enum_energies(b, W, edges)))


def exact_distribution(params: BmParams) -> np.ndarray:
    """p(z) over all 2^n_active states, indexed by the bit_states order."""
    _, b, W, edges = _active_subproblem(params)
    e = _enum_energies(b, W, edges)
    p = np.exp(-(e - e.min()))
    return p / p.sum()


def exact_moments(params: BmParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact <z_l> and <z_l z_m>, expanded back to full node/edge indexing."""
    active, b, W, edges = _active_subproblem(params)
    n = len(active)
    p = exact_distribution(params)
    total = 1 << n
    if n <= _CHUNK_BITS:
        mean_a = p @ bit_states(n)
        corr_a = p @ _pair_table(n, edges) if len(edges) else np.zeros(0)
    else:
        chunk = 1 << _CHUNK_BITS
        mean_a = np.zeros(n)
        corr_a = np.zeros(len(edges))
        for start in range(0, total, chunk):
            z = bit_states(n, start, min(chunk, total - start))
            w = p[start : start + len(z)]
            mean_a += w @ z
            if len(edges):
                corr_a += w @ (z[:, edges[:, 0]] * z[:, edges[:, 1]])
    mean = np.zeros(params.conn.num_nodes)
    mean[active] = mean_a
    corr = np.zeros(params.conn.num_edges)
    if params.conn.num_edges:
        keep = params.conn.active_mask[params.conn.edges[:, 0]] & params.conn.active_mask[
            params.conn.edges[:, 1]
        ]
        corr[keep] = corr_a
    return mean, corr


# ---------------------------------------------------------------------------
# tiny-system quantum verifier


def qbm_exact(params: BmParams, cfg: QbmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact transverse-field distribution and its classical lower envelope.

    Builds the 2^n x 2^n operator whose diagonal is the {0,1} energy H(z)
    and whose off-diagonal part is gamma * sum_l X_l (bit flips), then
    returns p(z) = <z|exp(-H)|z> / Tr exp(-H) via dense eigendecomposition
    together with p_tilde(z) = exp(-H(z)) / Tr exp(-H).  p >= p_tilde
    pointwise because <z|exp(-H)|z> >= exp(-<z|H|z>) for Hermitian H.
    """
    active, b, W, edges = _active_subproblem(params)
    n = len(active)
    if n > cfg.max_units:
        raise SizeCapError(f"{n} active units exceeds the diagonalization cap {cfg.max_units}")
    dim = 1 << n
    e_cl = _enum_energies(b, W, edges)
    H = np.diag(e_cl)
    idx = np.arange(dim)
    for l in range(n):
        H[idx, idx ^ (1 << l)] += cfg.gamma
    evals, evecs = np.linalg.eigh(H)
    shifted = np.exp(-(evals - evals.min()))
    p = (evecs**2) @ shifted
    log_zq = logsumexp(-evals)
    p = p / p.sum()
    p_tilde = np.exp(-e_cl - log_zq)
    return p, p_tilde


# ---------------------------------------------------------------------------
# {0,1} <-> spin convention bridge


def _incident_sum(conn: Connectivity, edge_values: np.ndarray) -> np.ndarray:
    """Per node: sum of edge values over incident edges."""
    out = np.zeros(conn.num_nodes)
    if conn.num_edges:
        np.add.at(out, conn.edges[:, 0], edge_values)
        np.add.at(out, conn.edges[:, 1], edge_values)
    return out


def to_ising(params: BmParams, beta_eff: float) -> IsingView:
    """Map {0,1} parameters to (h, J) such that sampling spins from
    exp(-beta_eff * H_{h,J}) reproduces p(z) after z = (s + 1) / 2."""
    if beta_eff <= 0:
        raise ValueError("beta_eff must be positive")
    J = params.W / (4.0 * beta_eff)
    h = params.b / (2.0 * beta_eff) + _incident_sum(params.conn, params.W) / (4.0 * beta_eff)
    return IsingView(params.conn, h, J, beta_eff)


def from_ising(view: IsingView) -> BmParams:
    """Inverse of to_ising (round trip is identity to machine precision)."""
    beta = view.beta_eff
    W = 4.0 * beta * view.J
    b = 2.0 * beta * view.h - 2.0 * beta * _incident_sum(view.conn, view.J)
    return BmParams(view.conn, b, W)


def spins_to_bits(spins: np.ndarray) -> np.ndarray:
    return (np.asarray(spins, dtype=np.float64) + 1.0) / 2.0


def bits_to_spins(bits: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(bits, dtype=np.float64) - 1.0
