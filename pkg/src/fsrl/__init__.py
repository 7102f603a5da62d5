"""Sparse feature steering of a frozen toy transformer, trained with SimPO.

A from-scratch numpy stack: reverse-mode autodiff, a small decoder-only
transformer, a sparse autoencoder over its residual stream, a sparse steering
adapter over the autoencoder's features, the preference objective, and the
analysis and verification tools around them.
"""

__version__ = "0.1.0"
