"""Sequential adapter training, regularizers and evaluation."""
