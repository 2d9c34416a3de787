"""Latent fertility and reordering sequence transduction."""

from . import (autodiff, checks, cli, data, fertility, grammar, inference,
               model, oracles, reordering, training)

__version__ = "0.1.0"

__all__ = ["autodiff", "checks", "cli", "data", "fertility", "grammar",
           "inference", "model", "oracles", "reordering", "training",
           "__version__"]
