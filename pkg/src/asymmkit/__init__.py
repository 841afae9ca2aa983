"""Asymmetrical bottleneck blocks, MobileNet-style networks and their cost."""

__version__ = "0.1.0"
