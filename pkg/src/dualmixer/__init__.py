"""Dual-path mixer models and relationship-preserving contrastive training
for remaining-useful-life prediction on multivariate run-to-failure series."""

__version__ = "0.1.0"
