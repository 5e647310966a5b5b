"""Numerical lab for the parabolic Anderson model driven by rough fractional noise."""
from . import errors, experiments_cli, feynman_kac_mc, noise_sampler, pam_solver, spectral_model, variational_solver

__all__ = ["errors", "experiments_cli", "feynman_kac_mc", "noise_sampler", "pam_solver",
           "spectral_model", "variational_solver"]
