"""Involution-augmented CNNs for desk-scale medical image work.

Subpackages:

- :mod:`invomed.tensor` — float64 array substrate and PRNG
- :mod:`invomed.autodiff` — tape, reverse accumulation, gradient checker
- :mod:`invomed.ops` — layer primitives (involution, conv, pooling, ...)
- :mod:`invomed.models` — architecture builders and parameter counting
- :mod:`invomed.data` — image IO, splits, synthetic blob datasets
- :mod:`invomed.training` — Adam, losses, training loop, metrics
- :mod:`invomed.explain` — kernel maps and Grad-CAM heatmaps
- :mod:`invomed.cli` — command-line entry point
"""

__version__ = "0.1.0"
