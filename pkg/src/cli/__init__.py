"""Experiment driver: ``python -m src.cli <command>``."""
