"""Hybrid tensor/sequence-parallel transformer inference across heterogeneous workers."""
__version__ = "0.1.0"
