"""TD(0) under polynomially mixing Markov data, with diagnostics."""

__version__ = "0.1.0"
