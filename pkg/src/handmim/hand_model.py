"""Parametric hand mesh: shape blend shapes, forward kinematics and linear blend skinning.

Kinematic joint order (16): wrist, then thumb, index, middle, ring, little with
three joints each (base to distal). Keypoint order (21): wrist, then per finger
the three joints followed by the fingertip.

Vertices come out in the model frame; global translation is applied only when
projecting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch

from .container import load_archive, save_archive
from .errors import BehindCameraError, InvariantError

FINGERS = ("thumb", "index", "middle", "ring", "little")
N_KIN = 16
N_KEYPOINTS = 21
MANO_SIZES = {"P": 778, "J": 21, "B": 10, "Jk": 16}


class ManoParams(NamedTuple):
    """Joint axis-angles ``theta [Jk, 3]``, shape ``beta [B]``, translation ``t [3]`` (meters).

    A leading batch axis on every field is allowed.
    """

    theta: object
    beta: object
    t: object

    def flat(self):
        lib = torch if isinstance(self.theta, torch.Tensor) else np
        th = self.theta.reshape(*self.theta.shape[:-2], -1)
        return lib.cat([th, self.beta, self.t], -1) if lib is torch else np.concatenate([th, self.beta, self.t], -1)

    def numpy(self) -> "ManoParams":
        return ManoParams(*(np.asarray(x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x) for x in self))


@dataclass
class HandModelData:
    template: np.ndarray  # [P, 3]
    shape_dirs: np.ndarray  # [P, 3, B]
    joint_regressor: np.ndarray  # [J, P]
    skin_weights: np.ndarray  # [P, Jk]
    parents: np.ndarray  # [Jk], root = -1
    rest_joints: np.ndarray  # [Jk, 3]
    kin_regressor: Optional[np.ndarray] = None  # [Jk, P]; rest joints follow shape when present
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=float)
        self.shape_dirs = np.asarray(self.shape_dirs, dtype=float)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=float)
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=float)
        if self.kin_regressor is not None:
            self.kin_regressor = np.asarray(self.kin_regressor, dtype=float)
        self.validate()
        self._torch_cache = {}

    @property
    def n_verts(self) -> int:
        return self.template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def n_kin(self) -> int:
        return self.parents.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    def validate(self):
        P, Jk = self.template.shape[0], self.parents.shape[0]
        if self.template.shape != (P, 3) or self.shape_dirs.shape[:2] != (P, 3):
            raise InvariantError("template / shape_dirs shapes disagree")
        if self.skin_weights.shape != (P, Jk) or self.joint_regressor.shape[1] != P:
            raise InvariantError("skin_weights / joint_regressor shapes disagree")
        if self.rest_joints.shape != (Jk, 3):
            raise InvariantError("rest_joints shape disagrees with parents")
        for name in ("joint_regressor", "skin_weights", "kin_regressor"):
            w = getattr(self, name)
            if w is None:
                continue
            if (w < 0).any() or not np.allclose(w.sum(axis=1), 1.0, atol=1e-6):
                raise InvariantError(f"{name} rows must be non-negative and sum to 1")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise InvariantError("parents must describe a single tree rooted at joint 0")
        for k in range(1, Jk):
            if not 0 <= self.parents[k] < k:
                raise InvariantError("parents must be topologically ordered (parent index < child index)")

    def tensors(self, dtype=torch.float64) -> dict:
        if dtype not in self._torch_cache:
            d = {
                "template": torch.as_tensor(self.template, dtype=dtype),
                "shape_dirs": torch.as_tensor(self.shape_dirs, dtype=dtype),
                "joint_regressor": torch.as_tensor(self.joint_regressor, dtype=dtype),
                "skin_weights": torch.as_tensor(self.skin_weights, dtype=dtype),
                "rest_joints": torch.as_tensor(self.rest_joints, dtype=dtype),
            }
            if self.kin_regressor is not None:
                d["kin_regressor"] = torch.as_tensor(self.kin_regressor, dtype=dtype)
            self._torch_cache[dtype] = d
        return self._torch_cache[dtype]

    def save(self, path):
        arrays = {
            "template": self.template,
            "shape_dirs": self.shape_dirs,
            "joint_regressor": self.joint_regressor,
            "skin_weights": self.skin_weights,
            "parents": self.parents,
            "rest_joints": self.rest_joints,
        }
        if self.kin_regressor is not None:
            arrays["kin_regressor"] = self.kin_regressor
        meta = {"units": "meters", "conventions": "axis-angle theta, root joint 0, row-major", **self.meta}
        return save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "HandModelData":
        """Load a hand-model archive. Unknown arrays (e.g. pose correctives) are ignored."""
        arrays, meta = load_archive(path)
        keys = ("template", "shape_dirs", "joint_regressor", "skin_weights", "parents", "rest_joints")
        missing = [k for k in keys if k not in arrays]
        if missing:
            raise InvariantError(f"hand-model archive lacks arrays: {missing}")
        return cls(**{k: arrays[k] for k in keys}, kin_regressor=arrays.get("kin_regressor"), meta=meta)


def rodrigues(rotvec: torch.Tensor) -> torch.Tensor:
    """Axis-angle ``[..., 3]`` to rotation matrices ``[..., 3, 3]``; exact identity at zero."""
    angle2 = (rotvec**2).sum(-1, keepdim=True)[..., None]
    small = angle2 < 1e-12
    safe2 = torch.where(small, torch.ones_like(angle2), angle2)
    a = safe2.sqrt()
    sinc = torch.where(small, 1.0 - angle2 / 6.0, torch.sin(a) / a)
    cosc = torch.where(small, 0.5 - angle2 / 24.0, (1.0 - torch.cos(a)) / safe2)
    x, y, z = rotvec.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(*rotvec.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=rotvec.dtype).expand_as(K)
    return eye + sinc * K + cosc * (K @ K)


def _as_tensor(x, dtype):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def shaped_template(model: HandModelData, beta: torch.Tensor) -> torch.Tensor:
    T = model.tensors(beta.dtype)
    return T["template"] + torch.einsum("pdb,...b->...pd", T["shape_dirs"], beta)


def posed_joints_and_transforms(model: HandModelData, theta: torch.Tensor, beta: torch.Tensor):
    """Forward kinematics.

    Returns the shaped template, rest joints ``J``, global joint rotations and
    joint displacements ``D`` (posed joints are ``J + D``). Working with
    displacements keeps the zero pose bit-exact.
    """
    T = model.tensors(theta.dtype)
    v_shaped = shaped_template(model, beta)
    if "kin_regressor" in T:
        J = torch.einsum("kp,...pd->...kd", T["kin_regressor"], v_shaped)
    else:
        J = T["rest_joints"].expand(*theta.shape[:-2], -1, -1)
    R = rodrigues(theta)
    eye = torch.eye(3, dtype=theta.dtype)
    parents = model.parents
    rots, disp = [R[..., 0, :, :]], [torch.zeros_like(J[..., 0, :])]
    for k in range(1, model.n_kin):
        p = parents[k]
        rots.append(rots[p] @ R[..., k, :, :])
        bone = (J[..., k, :] - J[..., p, :])[..., None]
        disp.append(disp[p] + ((rots[p] - eye) @ bone)[..., 0])
    return v_shaped, J, torch.stack(rots, -3), torch.stack(disp, -2)


def forward_torch(model: HandModelData, theta: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    v_shaped, J, G_rot, D = posed_joints_and_transforms(model, theta, beta)
    W = model.tensors(theta.dtype)["skin_weights"]
    eye = torch.eye(3, dtype=theta.dtype)
    # v' = v + sum_k w_k [(G_k - I)(v - J_k) + D_k]; skin rows sum to one
    rel = v_shaped[..., :, None, :] - J[..., None, :, :]  # [..., P, Jk, 3]
    moved = ((G_rot - eye)[..., None, :, :, :] @ rel[..., None])[..., 0] + D[..., None, :, :]
    return v_shaped + torch.einsum("pk,...pki->...pi", W, moved)


def posed_joints(model: HandModelData, theta: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    _, J, _, D = posed_joints_and_transforms(model, theta, beta)
    return J + D


def forward(model: HandModelData, theta, beta):
    """Mesh vertices ``[..., P, 3]`` for pose ``theta [..., Jk, 3]`` and shape ``beta [..., B]``."""
    if isinstance(theta, torch.Tensor):
        return forward_torch(model, theta, _as_tensor(beta, theta.dtype))
    out = forward_torch(model, _as_tensor(theta, torch.float64), _as_tensor(beta, torch.float64))
    return out.numpy()


def regress_joints(model: HandModelData, vertices):
    if isinstance(vertices, torch.Tensor):
        return torch.einsum("jp,...pd->...jd", model.tensors(vertices.dtype)["joint_regressor"], vertices)
    return np.einsum("jp,...pd->...jd", model.joint_regressor, np.asarray(vertices, dtype=float))


def project(J3D, t, K, strict: bool = True):
    """Perspective projection of ``J3D + t`` through intrinsics ``K``.

    With ``strict`` a non-positive depth raises :class:`BehindCameraError`;
    otherwise depths are clamped to a small positive value.
    """
    is_torch = isinstance(J3D, torch.Tensor)
    lib = torch if is_torch else np
    if is_torch:
        t = _as_tensor(t, J3D.dtype)
        K = _as_tensor(K, J3D.dtype)
    else:
        J3D, t, K = (np.asarray(a, dtype=float) for a in (J3D, t, K))
    cam = J3D + t[..., None, :]
    p = (K[..., None, :, :] @ cam[..., None])[..., 0]
    z = p[..., 2:3]
    if strict:
        bad = (z[..., 0] <= 0)
        if bool(bad.any()):
            zz = z[..., 0]
            idx = np.argwhere(bad.detach().cpu().numpy() if is_torch else bad)[0]
            raise BehindCameraError(int(idx[-1]), float(zz[tuple(idx)]))
    else:
        z = lib.clip(z, 1e-3, None) if not is_torch else z.clamp(min=1e-3)
    return p[..., :2] / z


def intrinsics(focal: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# SynHand: procedural 63-vertex hand shipped for tests and synthetic data.

_FINGER_SPECS = {
    # base (m), direction, segment lengths (m), ring radius (m)
    "thumb": ((0.025, 0.020, 0.0), (0.6, 0.8, 0.0), (0.035, 0.030, 0.025), 0.010),
    "index": ((0.022, 0.085, 0.0), (0.1, 1.0, 0.0), (0.040, 0.025, 0.020), 0.008),
    "middle": ((0.007, 0.090, 0.0), (0.0, 1.0, 0.0), (0.045, 0.028, 0.022), 0.008),
    "ring": ((-0.008, 0.085, 0.0), (-0.05, 1.0, 0.0), (0.042, 0.026, 0.020), 0.0075),
    "little": ((-0.022, 0.075, 0.0), (-0.15, 1.0, 0.0), (0.032, 0.020, 0.018), 0.0065),
}
_RING_ANGLES = np.deg2rad([90.0, 210.0, 330.0])


def finger_axes():
    """Unit finger directions ``[5, 3]`` in SynHand's rest pose."""
    out = []
    for name in FINGERS:
        d = np.asarray(_FINGER_SPECS[name][1], dtype=float)
        out.append(d / np.linalg.norm(d))
    return np.stack(out)


def synhand() -> HandModelData:
    """Build SynHand: P=63, Jk=16, J=21, B=4.

    Shape coefficients: overall size, finger length, palm width, thickness.
    Every joint sits at the centroid of a three-vertex ring, so the joint
    regressor recovers posed joints exactly.
    """
    verts, weights, shape = [], [], []
    kin_rows, kp_rows = [], []
    Jk = N_KIN
    z = np.array([0.0, 0.0, 1.0])

    def add(v, w, s):
        verts.append(np.asarray(v, dtype=float))
        weights.append(w)
        shape.append(s)
        return len(verts) - 1

    def wvec(pairs):
        w = np.zeros(Jk)
        for j, a in pairs:
            w[j] += a
        return w

    # wrist ring in the x-z plane around the origin
    ring = []
    for a in _RING_ANGLES:
        v = 0.02 * np.array([np.cos(a), 0.0, np.sin(a)])
        ring.append(add(v, wvec([(0, 1.0)]), (v * 0.08, np.zeros(3), [v[0] * 0.1, 0, 0], v * 0.15)))
    wrist_row = ring
    # palm box and palm centers
    palm = [(x, y, zz) for x in (-0.03, 0.03) for y in (0.02, 0.075) for zz in (-0.012, 0.012)]
    palm += [(0.0, 0.045, -0.012), (0.0, 0.045, 0.012)]
    for v in palm:
        v = np.asarray(v)
        add(v, wvec([(0, 1.0)]), (v * 0.08, np.zeros(3), [v[0] * 0.1, 0, 0], [0, 0, v[2] * 0.15]))

    rest_joints = np.zeros((Jk, 3))
    parents = -np.ones(Jk, dtype=np.int64)
    finger_rings, tips = [], []
    for f, name in enumerate(FINGERS):
        base, d, lengths, radius = _FINGER_SPECS[name]
        base = np.asarray(base, dtype=float)
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        e1 = np.cross(d, z)
        e1 /= np.linalg.norm(e1)
        pos = base.copy()
        rings = []
        for s in range(3):
            k = 1 + 3 * f + s
            parent = 0 if s == 0 else k - 1
            parents[k] = parent
            rest_joints[k] = pos
            idx = []
            for a in _RING_ANGLES:
                off = radius * (np.cos(a) * e1 + np.sin(a) * z)
                v = pos + off
                along = d * np.dot(pos - base, d) * 0.1
                idx.append(
                    add(v, wvec([(parent, 0.5), (k, 0.5)]), (v * 0.08, along, [v[0] * 0.1, 0, 0], off * 0.15))
                )
            rings.append(idx)
            pos = pos + lengths[s] * d
        tip = pos
        along = d * np.dot(tip - base, d) * 0.1
        tips.append(add(tip, wvec([(3 + 3 * f, 1.0)]), (tip * 0.08, along, [tip[0] * 0.1, 0, 0], np.zeros(3))))
        finger_rings.append(rings)

    P = len(verts)
    template = np.stack(verts)
    shape_dirs = np.stack([np.stack([np.asarray(c, dtype=float) for c in s], axis=-1) for s in shape])
    skin = np.stack(weights)

    def ring_row(idx):
        r = np.zeros(P)
        r[idx] = 1.0 / 3.0
        return r

    kin_rows = [ring_row(wrist_row)]
    kp_rows = [ring_row(wrist_row)]
    for f in range(5):
        for s in range(3):
            kin_rows.append(ring_row(finger_rings[f][s]))
            kp_rows.append(ring_row(finger_rings[f][s]))
        tip_row = np.zeros(P)
        tip_row[tips[f]] = 1.0
        kp_rows.append(tip_row)
    kin_reg = np.stack(kin_rows)
    return HandModelData(
        template=template,
        shape_dirs=shape_dirs,
        joint_regressor=np.stack(kp_rows),
        skin_weights=skin,
        parents=parents,
        rest_joints=kin_reg @ template,
        kin_regressor=kin_reg,
        meta={"name": "SynHand"},
    )


# Bones drawn by the renderer, as keypoint index pairs.
BONES = [(0, 1 + 4 * f) for f in range(5)] + [(1 + 4 * f + s, 2 + 4 * f + s) for f in range(5) for s in range(3)]
