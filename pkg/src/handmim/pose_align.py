"""Pseudo-keypoint view of the class token and its latent-space alignment.

The projected class token is read as ``K_p`` 2D points. Undoing a view's
geometric transform on those points maps both views back to the shared
pre-augmentation frame.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .augment import ViewTransform, apply_geometric, invert_geometric
from .errors import ConfigurationError, InvariantError

PSEUDO_COUNT = 128


def class_to_pseudo(class_proj, count: int = PSEUDO_COUNT):
    """Reshape a ``[..., 2*count]`` vector into ``[..., count, 2]`` points."""
    if class_proj.shape[-1] != 2 * count:
        raise ConfigurationError(f"expected length {2 * count}, got {class_proj.shape[-1]}")
    return class_proj.reshape(*class_proj.shape[:-1], count, 2)


def flatten_pseudo(points):
    return points.reshape(*points.shape[:-2], -1)


def align(kp: np.ndarray, xf: ViewTransform, unit: float = 1.0) -> np.ndarray:
    """Apply the inverse view transform to every pseudo keypoint.

    ``unit`` is the number of pixels per latent coordinate; the offset is
    divided by it so pixel-valued transforms act on unitless latent points.
    """
    return invert_geometric(kp, _rescaled(xf, unit))


def push(kp: np.ndarray, xf: ViewTransform, unit: float = 1.0) -> np.ndarray:
    """Forward view transform on latent points, the inverse of :func:`align`."""
    return apply_geometric(kp, _rescaled(xf, unit))


def _rescaled(xf, unit):
    if unit == 1.0:
        return xf
    return ViewTransform(xf.angle, xf.scale, (xf.offset[0] / unit, xf.offset[1] / unit), xf.photo, xf.seed)


def transform_tensors(xfs: Sequence[ViewTransform], unit: float = 1.0, dtype=torch.float32):
    """Stack a batch of transforms into ``(rotations [B,2,2], scales [B], offsets [B,2])``."""
    rot = torch.tensor(np.stack([xf.rotation for xf in xfs]), dtype=dtype)
    scale = torch.tensor([xf.scale for xf in xfs], dtype=dtype)
    if not bool((scale > 0).all()):
        raise InvariantError("scale must be positive")
    offset = torch.tensor([xf.offset for xf in xfs], dtype=dtype) / unit
    return rot, scale, offset


def align_batch(kp: torch.Tensor, rot: torch.Tensor, scale: torch.Tensor, offset: torch.Tensor) -> torch.Tensor:
    """Differentiable batched :func:`align` on ``[B, K, 2]`` points."""
    return (kp @ rot + offset[:, None, :]) / scale[:, None, None]
