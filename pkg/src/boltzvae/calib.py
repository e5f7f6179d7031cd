"""Real-time effective-inverse-temperature tracking for black-box samplers.

A single scalar beta_eff relates the programmed spin parameters (h, J) to
the Boltzmann distribution the sampler actually produces.  It is learned
by matching mean energies between hardware draws and draws from an
auxiliary machine at the current estimate:

    beta <- beta + gamma * (E_aux[H_{h,J}] - E_hw[H_{h,J}]),

with the energies computed from the bare (h, J).  Hotter-than-estimated
hardware (higher mean energy) drives the estimate down, and the update has
its fixed point where the two expectations agree.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .rbm import IsingView, bits_to_spins, spin_energy
from .samplers import SampleBatch

BETA_FLOOR = 1e-4


@dataclass
class CalibState:
    beta_eff: float = 1.0
    gamma: float = 1e-3
    smoothing: int = 10
    history: deque = field(default_factory=lambda: deque(maxlen=4096))
    _updates: deque = None
    step: int = 0

    def __post_init__(self):
        if self.beta_eff <= 0:
            raise ValueError("beta_eff must start positive")
        self._updates = deque(maxlen=self.smoothing)


def update_beta(state: CalibState, ising: IsingView, hw_samples: SampleBatch,
                aux_samples: SampleBatch) -> CalibState:
    """One smoothed estimator step; projects the estimate to stay positive."""
    if hw_samples.n_samples == 0 or aux_samples.n_samples == 0:
        raise ValueError("both sample batches must be nonempty")
    e_hw = spin_energy(ising, bits_to_spins(hw_samples.bits)).mean()
    e_aux = spin_energy(ising, bits_to_spins(aux_samples.bits)).mean()
    raw = state.gamma * (e_aux - e_hw)
    state._updates.append(raw)
    state.beta_eff = max(state.beta_eff + float(np.mean(state._updates)), BETA_FLOOR)
    state.step += 1
    state.history.append((state.step, state.beta_eff))
    return state


def scaled_inference_gradient(beta_eff: float, prior_energy_grad: np.ndarray) -> np.ndarray:
    """Scale the prior-energy pathway into the encoder by the tracked beta."""
    return beta_eff * np.asarray(prior_energy_grad, dtype=np.float64)
