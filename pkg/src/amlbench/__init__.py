"""Desk-scale benchmark for direct clean-action flow policies and gated
multi-view token fusion, on a deterministic 2-D manipulation toy world."""

__version__ = "0.1.0"
