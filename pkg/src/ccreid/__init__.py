"""Cloth-changing person re-identification with multigranular capsule heads."""

__version__ = "0.1.0"
