"""Deformation-aware local features: detector, descriptors, training and evaluation."""
__version__ = "0.1.0"
