"""Shipped model configurations."""
