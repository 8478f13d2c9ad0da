"""Poisson flow joint model: augmented-dimension perturbation, conditional
training and sampling for multiphase low-dose volumes, and an exact field oracle."""

__version__ = "0.1.0"
