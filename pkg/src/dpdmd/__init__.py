"""Distributed online primal-dual dynamic mirror descent with time-varying coupled constraints."""

__version__ = "0.1.0"
