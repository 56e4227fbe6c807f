"""Numerical laboratory for score-based generative modeling of tilted densities."""

__version__ = "0.1.0"
