"""Viewpoint-aligned person re-identification at desk scale.

The package bundles a numpy autodiff engine, a procedural articulated body
model with a software rasterizer, style randomization with a texture
predictor, a dual-stream attention-fused backbone, and the training and
retrieval-evaluation harness that ties them together.
"""

from .tensor import Tensor, apply, backward, finite_difference_check, no_grad

__version__ = "0.1.0"
