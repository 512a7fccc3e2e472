"""Sensitivity-based distributed model predictive control."""
