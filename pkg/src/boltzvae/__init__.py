"""Discrete-latent VAE with Boltzmann-machine priors on annealer-style graphs."""

__version__ = "0.1.0"
