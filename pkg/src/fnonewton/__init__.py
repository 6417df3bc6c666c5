"""Learned initial guesses for Jacobian-free Newton-Krylov solves of nonlinear diffusion problems."""

__version__ = "0.1.0"
