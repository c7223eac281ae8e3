"""Desk-scale dynamic Gaussian splatting: differentiable CPU renderer,
motion-basis optimization, synthetic ground-truth generation, and metrics."""

__version__ = "0.1.0"
