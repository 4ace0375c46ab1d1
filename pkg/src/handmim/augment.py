"""Two-view augmentation with recorded, invertible geometry.

Geometry lives in a centered math frame: origin at the image center, x to the
right, y up, units of pixels. A view maps an original point ``p`` to
``R(gamma * p - offset)`` and rendering samples the source through the inverse.
Conversion to the row-major pixel grid happens only in :func:`render_view`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvariantError

MAX_ANGLE = np.deg2rad(150.0)


@dataclass(frozen=True)
class ViewTransform:
    angle: float = 0.0
    scale: float = 1.0
    offset: Tuple[float, float] = (0.0, 0.0)
    photo: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.angle)

    def to_dict(self) -> dict:
        return {
            "angle": float(self.angle),
            "scale": float(self.scale),
            "offset": [float(v) for v in self.offset],
            "photo": dict(self.photo),
            "seed": int(self.seed),
        }


IDENTITY = ViewTransform()


@dataclass(frozen=True)
class AugmentConfig:
    out_size: int = 64
    area_range: Tuple[float, float] = (0.08, 1.0)
    max_angle: float = MAX_ANGLE
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5
    photometric: bool = True


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def apply_geometric(p, xf: ViewTransform) -> np.ndarray:
    """Map original-frame point(s) ``[..., 2]`` into the view frame."""
    p = np.asarray(p, dtype=float)
    q = p * xf.scale - np.asarray(xf.offset, dtype=float)
    return q @ xf.rotation.T


def invert_geometric(p, xf: ViewTransform) -> np.ndarray:
    """Map view-frame point(s) ``[..., 2]`` back to the original frame."""
    if not xf.scale > 0:
        raise InvariantError(f"scale must be positive, got {xf.scale}")
    p = np.asarray(p, dtype=float)
    # R^-1 = R^T for a rotation; row-vector form gives p @ R
    return (p @ xf.rotation + np.asarray(xf.offset, dtype=float)) / xf.scale


def pixel_centers(size: int) -> np.ndarray:
    """Math-frame coordinates ``[size, size, 2]`` of every pixel center."""
    idx = np.arange(size) + 0.5 - size / 2.0
    x = np.broadcast_to(idx[None, :], (size, size))
    y = np.broadcast_to(-idx[:, None], (size, size))
    return np.stack([x, y], axis=-1)


def math_to_pixel(p, size: int) -> np.ndarray:
    """Math-frame point(s) to fractional (row, col) indices."""
    p = np.asarray(p, dtype=float)
    col = p[..., 0] + size / 2.0 - 0.5
    row = size / 2.0 - p[..., 1] - 0.5
    return np.stack([row, col], axis=-1)


def render_view(image: np.ndarray, xf: ViewTransform, out_size: int) -> np.ndarray:
    """Resample ``image`` through the geometric part of ``xf`` (bilinear, zero fill)."""
    image = np.asarray(image, dtype=float)
    src = invert_geometric(pixel_centers(out_size), xf)
    rc = math_to_pixel(src, image.shape[0])
    coords = [rc[..., 0], rc[..., 1]]
    out = np.empty((out_size, out_size, image.shape[2]))
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(image[..., ch], coords, order=1, mode="constant", cval=0.0)
    return out


def _gray(img):
    return img @ np.array([0.299, 0.587, 0.114])


def sample_photometric(rng: np.random.Generator, cfg: AugmentConfig) -> dict:
    if not cfg.photometric:
        return {}
    photo = {
        "brightness": float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
        "contrast": float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
        "saturation": float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
        "grayscale": bool(rng.random() < cfg.grayscale_p),
        "blur_sigma": 0.0,
        "solarize": None,
    }
    if rng.random() < cfg.blur_p:
        photo["blur_sigma"] = float(rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.solarize_p:
        photo["solarize"] = float(cfg.solarize_threshold)
    return photo


def apply_photometric(img: np.ndarray, photo: dict) -> np.ndarray:
    if not photo:
        return img
    img = np.clip(img * photo["brightness"], 0, 1)
    mean = _gray(img).mean()
    img = np.clip(mean + (img - mean) * photo["contrast"], 0, 1)
    g = _gray(img)[..., None]
    img = np.clip(g + (img - g) * photo["saturation"], 0, 1)
    if photo["grayscale"]:
        img = np.repeat(_gray(img)[..., None], 3, axis=-1)
    if photo["blur_sigma"] > 0:
        img = ndimage.gaussian_filter(img, sigma=(photo["blur_sigma"], photo["blur_sigma"], 0))
    if photo["solarize"] is not None:
        img = np.where(img >= photo["solarize"], 1.0 - img, img)
    return img


def sample_transform(seed: int, src_size: int, cfg: AugmentConfig) -> ViewTransform:
    """Draw a view transform; the same ``seed`` always yields the same fields."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.area_range
    while True:
        area = rng.uniform(lo, hi)
        side = src_size * np.sqrt(area)
        if side > 0:
            break
    half_room = (src_size - side) / 2.0
    center = rng.uniform(-half_room, half_room, size=2)
    scale = cfg.out_size / side
    angle = rng.uniform(0.0, cfg.max_angle)
    photo = sample_photometric(rng, cfg)
    return ViewTransform(
        angle=float(angle),
        scale=float(scale),
        offset=(float(center[0] * scale), float(center[1] * scale)),
        photo=photo,
        seed=int(seed),
    )


def crop_area_fraction(xf: ViewTransform, src_size: int, out_size: int) -> float:
    return float((out_size / xf.scale) ** 2 / src_size**2)


def make_view(image: np.ndarray, xf: ViewTransform, out_size: int) -> np.ndarray:
    return apply_photometric(render_view(image, xf, out_size), xf.photo)


def generate_views(image: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None):
    """Return ``(view_u, xf_u, view_v, xf_v)``, two independent augmentations of ``image``."""
    cfg = cfg or AugmentConfig()
    image = np.asarray(image, dtype=float)
    out = []
    for _ in range(2):
        xf = sample_transform(int(rng.integers(2**31 - 1)), image.shape[0], cfg)
        out.extend([make_view(image, xf, cfg.out_size), xf])
    return tuple(out)
