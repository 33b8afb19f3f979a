"""Desk-scale laboratory for correlated noise priors in video diffusion."""

__version__ = "0.1.0"
