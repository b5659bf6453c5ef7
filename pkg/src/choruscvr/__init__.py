"""Entire-space debiased conversion-rate modeling toolkit.

Negative-sample discrimination plus mutual soft alignment on top of a
click/conversion funnel, with a small autodiff engine, a synthetic
funnel simulator with counterfactual ground truth, and an evaluation
harness for bias-aware offline metrics.
"""

__version__ = "0.1.0"
