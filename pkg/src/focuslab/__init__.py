"""Learned and search-based autofocus on simulated focal stacks."""
__version__ = "0.1.0"
