"""Synthetic task sequences."""
