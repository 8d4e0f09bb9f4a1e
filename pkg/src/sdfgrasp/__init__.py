"""Reconstruction-aware multi-fingered grasp synthesis with learned signed distance fields."""

__version__ = "0.1.0"
