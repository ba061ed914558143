"""Benchmarking pipeline for embedded neural-network model variants."""

__version__ = "0.1.0"
