"""Continual-learning metrics."""
