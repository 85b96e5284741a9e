"""Counterfactual multi-player bandit diversification of latent-factor
recommenders.

Submodules are imported on demand so ``cmbrec.cli`` can cap thread pools
before numpy initialises its BLAS backend.
"""
__version__ = "0.1.0"

__all__ = ["dataset", "models", "metrics", "ranking", "bandit", "rerank", "explain", "cli"]
