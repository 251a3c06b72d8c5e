"""Delayed fourth-order gradient flow laboratory."""
