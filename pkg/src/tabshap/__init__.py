"""Tabular networks trained jointly with an amortized Shapley explainer regularized by tree priors."""

__version__ = "0.1.0"
