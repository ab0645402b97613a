"""Diagnostics over trained adapters: sign agreement, weight shift, drift and the Taylor bound."""
