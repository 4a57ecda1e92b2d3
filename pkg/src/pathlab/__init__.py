"""Brownian motion with stochastic parallel transport on model manifolds, and
Monte Carlo checks of martingale identities and path-space gradient estimates."""

__version__ = "0.1.0"
