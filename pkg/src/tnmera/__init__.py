"""Tensor-network (2D MERA) classifier toolkit."""

__version__ = "0.1.0"
