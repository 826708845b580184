"""Input/output helpers for datasets, checkpoints and reports."""
