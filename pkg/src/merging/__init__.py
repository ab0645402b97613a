"""Adapter merging strategies."""
