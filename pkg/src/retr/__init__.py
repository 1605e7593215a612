"""Transformer ray renderer (meta-ray token, occlusion transformer, continuous
positional encoding) with a classical volume-rendering baseline, built on a
small numpy autodiff engine."""

__version__ = "0.1.0"
