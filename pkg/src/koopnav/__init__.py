"""Koopman-bilinear NMPC navigation for a perturbed differential-drive robot."""

__version__ = "0.1.0"
