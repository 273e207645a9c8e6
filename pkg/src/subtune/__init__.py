"""Subspace fine-tuning laboratory.

Decomposes linear-layer weights into a frozen semantic subspace plus trainable
artifact subspaces, trains them with gradient-statistics-driven selective layer
masking, and evaluates artifact detectors on synthetic token-sequence data.
"""

__version__ = "0.1.0"
