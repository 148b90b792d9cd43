"""Toy-scale laboratory for semantic diffusion watermarks and black-box attacks on them."""

__version__ = "0.1.0"
