"""Counterfactual policy mean embeddings: estimators, tests, and herding."""

__version__ = "0.1.0"
