"""Synthetic hand samples, FreiHAND-style dataset I/O and the unlabeled crop store.

On-disk layout (shared by real and synthetic data)::

    <root>/rgb/00000000.png ...
    <root>/<prefix>_K.json      # [N][3][3]
    <root>/<prefix>_xyz.json    # [N][21][3], camera frame, meters
    <root>/<prefix>_verts.json  # [N][P][3], camera frame, meters
    <root>/<prefix>_mano.json   # synthetic only: [N] of {"theta", "beta", "t"}

In memory, labeled synthetic samples keep 3D quantities in the model frame
(translation applied only when projecting). Loaded real samples have no
parameters, so their 3D quantities stay in the camera frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from matplotlib.path import Path as MplPath
from PIL import Image

from .errors import IngestionError
from .hand_model import (
    BONES,
    N_KIN,
    HandModelData,
    ManoParams,
    forward,
    intrinsics,
    project,
    regress_joints,
)

log = logging.getLogger(__name__)


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    K: np.ndarray
    j3d: np.ndarray
    j2d: np.ndarray
    verts: np.ndarray
    params: Optional[ManoParams] = None
    id: str = ""

    @property
    def labeled(self) -> bool:
        return self.j3d is not None and self.verts is not None


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    focal_ratio: float = 2.0  # focal length in units of image_size
    curl_range: tuple = (0.0, np.deg2rad(110.0))
    spread_range: tuple = (np.deg2rad(-15.0), np.deg2rad(25.0))
    root_range: tuple = ((-0.5, 0.5), (-0.5, 0.5), (-1.2, 1.2))
    beta_clip: float = 2.0
    depth_range: tuple = (0.3, 0.8)
    center_margin: float = 0.3  # wrist lands within [margin, 1 - margin] of the frame
    max_retries: int = 100

    @property
    def K(self) -> np.ndarray:
        s = self.image_size
        return intrinsics(self.focal_ratio * s, s / 2.0, s / 2.0)


def sample_pose(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    """Axis-angle pose: root within ``root_range``; fingers curl about x, base joints also spread about z."""
    theta = np.zeros((N_KIN, 3))
    theta[0] = [rng.uniform(*r) for r in cfg.root_range]
    for k in range(1, N_KIN):
        theta[k, 0] = rng.uniform(*cfg.curl_range)
        if (k - 1) % 3 == 0:
            theta[k, 2] = rng.uniform(*cfg.spread_range)
    return theta


def _background(rng, size):
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    from scipy.ndimage import zoom

    bg = zoom(coarse, (size / 4, size / 4, 1), order=1, mode="nearest")[:size, :size]
    bg = 0.85 * bg + 0.15 * rng.uniform(0.0, 1.0, size=(size, size, 3))
    return np.clip(bg, 0.0, 1.0)


def _segment_distance(px, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(px - a, axis=-1)
    u = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(px - (a + u[..., None] * ab), axis=-1)


def render(model: HandModelData, verts, j3d, t, K, size, rng) -> np.ndarray:
    """Flat-shaded capsule hand over a random background, painter's algorithm (far to near)."""
    img = _background(rng, size)
    skin = np.array([0.85, 0.62, 0.5]) * rng.uniform(0.7, 1.15) + rng.uniform(-0.05, 0.05, 3)
    cam_j = j3d + t
    j2 = project(j3d, t, K, strict=False)
    focal = K[0, 0]
    ys, xs = np.mgrid[0:size, 0:size]
    px = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(float)

    items = []
    # palm: convex hull of the palm vertices plus finger bases
    palm_idx = list(range(13))
    palm_pts = np.concatenate([project(verts[palm_idx], t, K, strict=False), j2[[1, 5, 9, 13, 17]]])
    palm_depth = float(np.mean((verts[palm_idx] + t)[:, 2]))
    items.append((palm_depth, "palm", palm_pts, 0.8))
    for a, b in BONES:
        depth = 0.5 * (cam_j[a, 2] + cam_j[b, 2])
        finger = (b - 1) // 4
        radius = 0.008 if finger else 0.009
        bone = cam_j[b] - cam_j[a]
        norm = np.linalg.norm(bone)
        facing = abs(bone[2]) / norm if norm > 0 else 1.0
        shade = 0.75 + 0.25 * (1.0 - facing) - 0.04 * ((b - 1) % 4)
        items.append((depth, "bone", (j2[a], j2[b], focal * radius / max(depth, 1e-3)), shade))
    for depth, kind, geom, shade in sorted(items, key=lambda it: -it[0]):
        if kind == "palm":
            from scipy.spatial import ConvexHull, QhullError

            try:
                hull = ConvexHull(geom)
            except QhullError:
                continue
            inside = MplPath(geom[hull.vertices]).contains_points(px.reshape(-1, 2)).reshape(size, size)
        else:
            a, b, r = geom
            inside = _segment_distance(px, a, b) <= max(r, 0.75)
        img[inside] = np.clip(skin * shade, 0.0, 1.0)
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are lossless."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_sample(rng: np.random.Generator, model: HandModelData, cfg: GenConfig = GenConfig(), id: str = ""):
    size = cfg.image_size
    K = cfg.K
    theta = sample_pose(rng, cfg)
    beta = np.clip(rng.standard_normal(model.n_shape), -cfg.beta_clip, cfg.beta_clip)
    verts = forward(model, theta, beta)
    j3d = regress_joints(model, verts)
    for _ in range(cfg.max_retries):
        z = rng.uniform(*cfg.depth_range)
        uv = rng.uniform(cfg.center_margin * size, (1 - cfg.center_margin) * size, size=2)
        t = np.array([(uv[0] - K[0, 2]) * z / K[0, 0], (uv[1] - K[1, 2]) * z / K[1, 1], z])
        if np.all((j3d + t)[:, 2] > 0):
            j2d = project(j3d, t, K)
            inside = (j2d >= 0).all(axis=1) & (j2d < size).all(axis=1)
            if inside.any():
                break
    else:
        raise IngestionError("could not place the hand inside the frame")
    image = quantize(render(model, verts, j3d, t, K, size, rng))
    return Sample(image, K, j3d, j2d, verts, ManoParams(theta, beta, t), id)


def generate_dataset(n: int, seed: int, model: HandModelData, cfg: GenConfig = GenConfig()) -> List[Sample]:
    rng = np.random.default_rng(seed)
    return [generate_sample(rng, model, cfg, id=f"{i:08d}") for i in range(n)]


def check_sample(sample: Sample, model: HandModelData, atol: float = 1e-6) -> bool:
    """True when the labels agree with the hand model: forward -> regress -> project."""
    p = sample.params
    verts = forward(model, p.theta, p.beta)
    j3d = regress_joints(model, verts)
    j2d = project(j3d, p.t, sample.K)
    return (
        np.allclose(verts, sample.verts, atol=atol, rtol=0)
        and np.allclose(j3d, sample.j3d, atol=atol, rtol=0)
        and np.allclose(j2d, sample.j2d, atol=atol, rtol=0)
    )


# ---------------------------------------------------------------------------
# FreiHAND-style layout


def _write_json(path, obj):
    path.write_text(json.dumps(obj, separators=(",", ":")))


def save_png(path, img):
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def save_freihand_dir(samples: Sequence[Sample], root, prefix: str = "training") -> Path:
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    Ks, xyz, verts, mano = [], [], [], []
    for i, s in enumerate(samples):
        save_png(root / "rgb" / f"{i:08d}.png", s.image)
        t = np.asarray(s.params.t) if s.params is not None else np.zeros(3)
        Ks.append(np.asarray(s.K).tolist())
        xyz.append((s.j3d + t).tolist())
        verts.append((s.verts + t).tolist())
        if s.params is not None:
            mano.append({k: np.asarray(v).tolist() for k, v in s.params._asdict().items()})
    _write_json(root / f"{prefix}_K.json", Ks)
    _write_json(root / f"{prefix}_xyz.json", xyz)
    _write_json(root / f"{prefix}_verts.json", verts)
    if mano and len(mano) == len(samples):
        _write_json(root / f"{prefix}_mano.json", mano)
    return root


def load_freihand_dir(path) -> List[Sample]:
    root = Path(path)
    k_files = sorted(root.glob("*_K.json"))
    if not k_files:
        return []
    prefix = k_files[0].name[: -len("_K.json")]
    files = {key: root / f"{prefix}_{key}.json" for key in ("K", "xyz", "verts", "mano")}
    arrays = {}
    for key, f in files.items():
        if f.exists():
            arrays[key] = json.loads(f.read_text())
        elif key != "mano":
            raise IngestionError(f"missing annotation file {f}")
    images = sorted((root / "rgb").glob("*.png")) + sorted((root / "rgb").glob("*.jpg"))
    images = sorted(images)
    n = len(arrays["K"])
    for key, arr in arrays.items():
        if len(arr) != n:
            raise IngestionError(f"{files[key]} has {len(arr)} entries, expected {n}")
    if len(images) != n:
        raise IngestionError(f"{root / 'rgb'} holds {len(images)} images, annotations list {n}")
    samples = []
    for i in range(n):
        K = np.asarray(arrays["K"][i], dtype=float)
        xyz = np.asarray(arrays["xyz"][i], dtype=float)
        verts = np.asarray(arrays["verts"][i], dtype=float)
        params = None
        t = np.zeros(3)
        if "mano" in arrays:
            m = arrays["mano"][i]
            params = ManoParams(*(np.asarray(m[k], dtype=float) for k in ("theta", "beta", "t")))
            t = params.t
        j3d, v = xyz - t, verts - t
        samples.append(Sample(load_png(images[i]), K, j3d, project(j3d, t, K, strict=False), v, params, images[i].stem))
    return samples


# ---------------------------------------------------------------------------
# Unlabeled pretraining corpus


@dataclass
class ImageStore:
    """Directory of PNG crops plus ``index.txt`` (one relative path per line)."""

    root: Path
    paths: List[str] = field(default_factory=list)

    @classmethod
    def open(cls, root) -> "ImageStore":
        root = Path(root)
        lines = (root / "index.txt").read_text().splitlines()
        return cls(root, [ln for ln in lines if ln.strip()])

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i) -> np.ndarray:
        return load_png(self.root / self.paths[i])

    def load_all(self) -> np.ndarray:
        return np.stack([self[i] for i in range(len(self))]) if self.paths else np.zeros((0, 0, 0, 3))


def crop_box(points2d, image_size: int, ratio: float = 1.3):
    """Square box ``(x0, y0, side)`` around ``points2d``, enlarged by ``ratio`` and kept inside the image."""
    pts = np.asarray(points2d, dtype=float)
    lo = np.clip(pts.min(0), 0, image_size)
    hi = np.clip(pts.max(0), 0, image_size)
    side = min(float(max(hi - lo) * ratio), float(image_size))
    side = max(side, 1.0)
    center = (lo + hi) / 2.0
    x0, y0 = np.clip(center - side / 2.0, 0.0, image_size - side)
    return float(x0), float(y0), side


def build_pretrain_corpus(datasets, out_dir, out_size: int = 64, ratio: float = 1.3) -> ImageStore:
    """Crop hands out of labeled datasets into an :class:`ImageStore`; labels are dropped."""
    out = Path(out_dir)
    (out / "crops").mkdir(parents=True, exist_ok=True)
    paths = []
    k = 0
    for dataset in datasets:
        for s in dataset:
            try:
                img = np.asarray(s.image, dtype=float)
                if img.ndim != 3:
                    raise ValueError(f"bad image shape {img.shape}")
                x0, y0, side = crop_box(s.j2d, img.shape[0], ratio)
                pil = Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
                crop = pil.resize((out_size, out_size), Image.BILINEAR, box=(x0, y0, x0 + side, y0 + side))
            except Exception as exc:  # noqa: BLE001 - unreadable samples are skipped
                log.warning("skipping sample %s: %s", getattr(s, "id", k), exc)
                continue
            rel = f"crops/{k:06d}.png"
            crop.save(out / rel, format="PNG")
            paths.append(rel)
            k += 1
    (out / "index.txt").write_text("".join(p + "\n" for p in paths))
    return ImageStore(out, paths)
