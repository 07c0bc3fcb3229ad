"""Hurdle and zero-inflated count models with random effects, their posterior
predictive expectations, and machine checks of credibility-order monotonicity."""

__version__ = "0.1.0"
