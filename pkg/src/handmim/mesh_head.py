"""Iterative hand-parameter regression with keypoint feedback, and the fine-tuning loss."""

from __future__ import annotations

import json
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .hand_model import HandModelData, ManoParams, forward_torch, project, regress_joints
from .vit import TokenSequence, ViTConfig, VisionTransformer

log = logging.getLogger(__name__)

N_RECTIFIERS = 3


def split_params(flat: torch.Tensor, n_kin: int, n_shape: int) -> ManoParams:
    theta = flat[..., : 3 * n_kin].reshape(*flat.shape[:-1], n_kin, 3)
    beta = flat[..., 3 * n_kin : 3 * n_kin + n_shape]
    return ManoParams(theta, beta, flat[..., -3:])


def _mlp(in_dim, hidden, out_dim, out_std):
    net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))
    nn.init.normal_(net[2].weight, std=out_std)
    nn.init.zeros_(net[2].bias)
    return net


class MeshHead(nn.Module):
    """Regresses hand parameters from backbone tokens.

    An initial estimate comes from the class token around a learned mean
    anchor; each of three rectifiers then samples patch features at the
    currently projected keypoints and adds a residual update.
    """

    def __init__(
        self,
        width: int,
        image_size: int,
        model: HandModelData,
        hidden: int = 64,
        sample_dim: int = 16,
        mean_t=(0.0, 0.0, 0.55),
        min_depth: float = 0.25,
        residual_std: float = 1e-3,
    ):
        super().__init__()
        self.hand = model
        self.image_size = image_size
        self.min_depth = min_depth
        self.n_kin, self.n_shape = model.n_kin, model.n_shape
        self.n_params = 3 * self.n_kin + self.n_shape + 3
        anchor = torch.zeros(self.n_params)
        anchor[-3:] = torch.tensor(mean_t)
        self.anchor = nn.Parameter(anchor)
        self.init_mlp = _mlp(width, hidden, self.n_params, residual_std)
        self.reduce = nn.Linear(width, sample_dim)
        n_kp = model.n_joints
        self.rectifiers = nn.ModuleList(
            _mlp(n_kp * sample_dim + self.n_params, hidden, self.n_params, residual_std) for _ in range(N_RECTIFIERS)
        )

    def _clamp_depth(self, flat):
        tz = flat[..., -1:].clamp(min=self.min_depth)
        return torch.cat([flat[..., :-1], tz], dim=-1)

    def keypoints_2d(self, params: ManoParams, K: torch.Tensor) -> torch.Tensor:
        verts = forward_torch(self.hand, params.theta, params.beta)
        return project(regress_joints(self.hand, verts), params.t, K, strict=False)

    def sample_features(self, grid_feats: torch.Tensor, j2d: torch.Tensor) -> torch.Tensor:
        """Bilinear samples ``[B, J, C]`` of ``grid_feats [B, C, g, g]`` at pixel coords ``j2d``."""
        norm = 2.0 * j2d / self.image_size - 1.0
        outside = (norm.abs() > 1).any()
        if bool(outside):
            log.debug("keypoints outside the image; clamping to the grid border")
        norm = norm.clamp(-1.0, 1.0)
        out = F.grid_sample(grid_feats, norm[:, :, None, :], mode="bilinear", padding_mode="border", align_corners=False)
        return out[..., 0].transpose(1, 2)

    def forward(self, tokens: TokenSequence, K: torch.Tensor) -> List[ManoParams]:
        """All four estimates (initial plus one per rectifier); the last is the prediction."""
        cls, patches = tokens.class_token, tokens.patch_tokens
        B, N, C = patches.shape
        g = int(round(N**0.5))
        K = torch.as_tensor(K, dtype=cls.dtype)
        if K.dim() == 2:
            K = K.expand(B, 3, 3)
        flat = self._clamp_depth(self.anchor + self.init_mlp(cls))
        history = [split_params(flat, self.n_kin, self.n_shape)]
        feats = self.reduce(patches).transpose(1, 2).reshape(B, -1, g, g)
        for rect in self.rectifiers:
            j2d = self.keypoints_2d(history[-1], K)
            sampled = self.sample_features(feats, j2d).reshape(B, -1)
            flat = self._clamp_depth(flat + rect(torch.cat([sampled, flat], dim=-1)))
            history.append(split_params(flat, self.n_kin, self.n_shape))
        return history


class HandMeshNet(nn.Module):
    """Backbone plus mesh head; the fine-tuning network."""

    def __init__(self, vit_cfg: ViTConfig, model: HandModelData, hidden: int = 64, sample_dim: int = 16):
        super().__init__()
        self.backbone = VisionTransformer(vit_cfg)
        self.head = MeshHead(vit_cfg.width, vit_cfg.image_size, model, hidden, sample_dim)

    def forward(self, images, K) -> List[ManoParams]:
        return self.head(self.backbone(images), K)


def regress(net: HandMeshNet, images, K) -> ManoParams:
    return net(images, K)[-1]


def finetune_loss(
    pred: ManoParams,
    gt: ManoParams,
    gt_verts,
    gt_j3d,
    gt_j2d,
    K,
    model: HandModelData,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    image_size: Optional[float] = None,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Parameter MSE + vertex L1 + (3D keypoint L1 + projected 2D keypoint L1), all means.

    ``gt`` may be ``None`` for data without parameter labels; the parameter term
    is then zero. With ``image_size`` the 2D residual is measured in coordinates
    normalised to ``[-1, 1]`` across the image instead of pixels, which keeps
    the 2D term on the same scale as the metric terms.
    """
    dtype = pred.theta.dtype
    as_t = lambda x: torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)
    w_mano, w_vert, w_kpt = weights
    verts = forward_torch(model, pred.theta, pred.beta)
    j3d = regress_joints(model, verts)
    j2d = project(j3d, pred.t, as_t(K))
    if gt is not None:
        gt_flat = torch.cat([as_t(gt.theta).reshape(*as_t(gt.theta).shape[:-2], -1), as_t(gt.beta), as_t(gt.t)], -1)
        l_mano = ((pred.flat() - gt_flat) ** 2).mean()
    else:
        l_mano = verts.sum() * 0.0
    l_vert = (verts - as_t(gt_verts)).abs().mean()
    l_j3d = (j3d - as_t(gt_j3d)).abs().mean()
    l_j2d = (j2d - as_t(gt_j2d)).abs().mean()
    if image_size is not None:
        l_j2d = l_j2d * (2.0 / image_size)
    l_kpt = l_j3d + l_j2d
    total = w_mano * l_mano + w_vert * l_vert + w_kpt * l_kpt
    terms = {"mano": l_mano, "vert": l_vert, "kpt": l_kpt, "kpt3d": l_j3d, "kpt2d": l_j2d}
    return total, terms


def prediction_record(sample_id: str, params: ManoParams, verts, j3d, j2d) -> str:
    """One JSON-lines record of the prediction export format."""
    p = params.numpy()
    rec = {
        "id": sample_id,
        "theta": p.theta.tolist(),
        "beta": p.beta.tolist(),
        "t": p.t.tolist(),
        "verts": np.asarray(verts).tolist(),
        "j3d": np.asarray(j3d).tolist(),
        "j2d": np.asarray(j2d).tolist(),
    }
    return json.dumps(rec, separators=(",", ":"))
