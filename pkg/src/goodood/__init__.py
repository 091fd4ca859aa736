"""Classifier-guided OOD sample synthesis with a small conditional diffusion
model, outlier-exposure fine-tuning, and KL-weighted unified OOD scoring on
synthetic 2-D data."""

__version__ = "0.1.0"
