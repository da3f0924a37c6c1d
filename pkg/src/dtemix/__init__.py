"""Distributional treatment effect estimation with two proxy variables.

Two-step estimator for the joint law of potential outcomes and the CDF of the
unit-level treatment effect: a constrained nonnegative matrix factorization
recovers the latent-class mixture, and an orthogonalized pairwise GMM step
turns it into point estimates with plug-in standard errors. Includes a
falsification test, Makarov bounds for comparison, a Monte Carlo harness, and
a Bernstein-sieve MLE for continuous latent heterogeneity.
"""

__version__ = "0.1.0"
