"""Perceptually regularized adversarial perturbations as saliency explanations."""

__version__ = "0.1.0"

from .tensor_core import CompGraph, Tensor  # noqa: F401
