"""Dense-matrix arithmetic with reverse-mode differentiation."""
