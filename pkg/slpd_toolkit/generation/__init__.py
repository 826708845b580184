"""Synthetic dataset generation."""
