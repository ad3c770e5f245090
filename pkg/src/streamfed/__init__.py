"""Decentralized per-stream-subset learning with contract-elected aggregators."""

__version__ = "0.1.0"
