"""Personalized federated unsupervised learning under a hierarchical-Bayes prior."""

__version__ = "0.1.0"
