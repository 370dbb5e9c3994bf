"""Reconstruction of hidden training image batches from batch-averaged gradients."""

from gradinv.tensor import Tensor, Graph, backward, finite_difference_gradient

__all__ = ["Tensor", "Graph", "backward", "finite_difference_gradient"]
__version__ = "0.1.0"
