"""Continuous-conditional point-cloud GAN on synthetic parametric shapes."""

__version__ = "0.1.0"
