"""Clustering, inter-slide structure and evaluation."""
