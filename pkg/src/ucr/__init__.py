"""Unsupervised lifelong representation learning with contrastive rehearsal."""

__version__ = "0.1.0"
