"""Desk-scale toolkit for auditing scanner-manufacturer bias in head CT models."""

__version__ = "0.1.0"
