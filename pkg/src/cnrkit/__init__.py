"""Cokrig-and-regress (CNR) for spatially misaligned response and covariates."""

__version__ = "0.1.0"
