"""Numerical laboratory for box spectra, quadratic-form counting and theta sums on SL(2)^d."""

__version__ = "0.1.0"
