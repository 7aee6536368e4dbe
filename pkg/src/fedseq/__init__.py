"""Federated-learning simulator with sequentially trained client groups."""

__version__ = "0.1.0"
