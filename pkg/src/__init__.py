"""Continual low-rank adaptation lab with parameter-stability regularization and magnitude merging."""
