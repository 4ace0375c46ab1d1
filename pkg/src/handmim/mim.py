"""Token masking, teacher-student distillation losses and EMA teacher upkeep."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvariantError, NumericError

log = logging.getLogger(__name__)

MASK_RATIO_RANGE = (0.1, 0.5)


@dataclass(frozen=True)
class MaskSpec:
    mask: np.ndarray  # bool [n^2], True = masked
    ratio: float

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def masked_count(n_tokens: int, ratio: float) -> int:
    """``floor(ratio * n_tokens)`` computed exactly on the binary value of ``ratio``."""
    return int(Fraction(ratio) * n_tokens)


def sample_mask(n_tokens: int, ratio: float, rng: np.random.Generator, ratio_range=MASK_RATIO_RANGE) -> MaskSpec:
    lo, hi = ratio_range
    if not lo <= ratio <= hi:
        raise ConfigurationError(f"mask ratio {ratio} outside [{lo}, {hi}]")
    if n_tokens < 1:
        raise ConfigurationError("need at least one token")
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.choice(n_tokens, masked_count(n_tokens, ratio), replace=False)] = True
    return MaskSpec(mask, float(ratio))


def apply_mask(tokens, spec, mask_token):
    """Replace masked rows of ``tokens [..., n^2, c]`` by ``mask_token``; other rows pass through untouched."""
    mask = spec.mask if isinstance(spec, MaskSpec) else spec
    if isinstance(tokens, torch.Tensor):
        mask = torch.as_tensor(mask, dtype=torch.bool, device=tokens.device)
        return torch.where(mask[..., None], mask_token.to(tokens.dtype), tokens)
    return np.where(np.asarray(mask, dtype=bool)[..., None], np.asarray(mask_token), tokens)


class ProjectionHead(nn.Module):
    """Three-layer MLP to an L2-normalised bottleneck, then a weight-normalised linear map.

    Outputs are cosine similarities against ``out_dim`` unit prototypes, so logits
    live in ``[-1, 1]`` whatever the backbone scale.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, bottleneck: int = None):
        super().__init__()
        bottleneck = bottleneck or hidden
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        self.prototypes = nn.Parameter(torch.empty(out_dim, bottleneck))
        nn.init.normal_(self.prototypes)

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1, eps=1e-12)
        return z @ F.normalize(self.prototypes, dim=-1).transpose(0, 1)


@dataclass
class DistillState:
    """Mutable distillation state: networks, centers, momentum and temperatures.

    ``student`` and ``teacher`` are modules of identical architecture; the teacher
    only ever changes through :func:`ema_update`.
    """

    student: nn.Module
    teacher: nn.Module
    center_pose: torch.Tensor
    center_patch: torch.Tensor
    momentum: float = 0.996
    temp_teacher: float = 0.04
    temp_student: float = 0.1
    center_momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise InvariantError(f"momentum {self.momentum} outside [0, 1]")
        if self.temp_teacher <= 0 or self.temp_student <= 0:
            raise InvariantError("temperatures must be positive")

    @classmethod
    def from_student(cls, student: nn.Module, pose_dim: int, patch_dim: int, **kw) -> "DistillState":
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        dtype = next(student.parameters()).dtype
        return cls(student, teacher, torch.zeros(pose_dim, dtype=dtype), torch.zeros(patch_dim, dtype=dtype), **kw)


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite logits")


def soft_cross_entropy(teacher_logits, student_logits, center, temp_teacher, temp_student):
    """Per-row ``H(softmax((t - center)/tau_t), softmax(s/tau_s))``."""
    p_t = torch.softmax((teacher_logits - center) / temp_teacher, dim=-1)
    log_p_s = torch.log_softmax(student_logits / temp_student, dim=-1)
    return -(p_t * log_p_s).sum(dim=-1)


def pose_loss(t_cls_u, t_cls_v, s_cls_u, s_cls_v, state: DistillState):
    """Cross-view class-token loss on aligned projections, batch-averaged.

    Teacher view u supervises student view v and vice versa.
    """
    _check_finite(t_cls_u, t_cls_v, s_cls_u, s_cls_v)
    args = (state.center_pose, state.temp_teacher, state.temp_student)
    t_u, t_v = t_cls_u.detach(), t_cls_v.detach()
    loss = soft_cross_entropy(t_u, s_cls_v, *args) + soft_cross_entropy(t_v, s_cls_u, *args)
    return loss.mean()


def _masked_mean_ce(t_patch, s_patch, mask, state, masked_only):
    ce = soft_cross_entropy(t_patch.detach(), s_patch, state.center_patch, state.temp_teacher, state.temp_student)
    if not masked_only:
        return ce.mean()
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if mask.shape != ce.shape:
        mask = mask.expand_as(ce)
    n = int(mask.sum())
    if n == 0:
        log.debug("patch loss: no masked positions")
        return ce.sum() * 0.0
    return (ce * mask).sum() / n


def patch_loss(
    t_patch_u,
    s_patch_u,
    mask_u,
    state: DistillState,
    t_patch_v=None,
    s_patch_v=None,
    mask_v=None,
    masked_only: bool = True,
):
    """Parallel-view patch-token loss, averaged over masked positions and summed over views.

    Teacher tokens come from the clean view, student tokens from the masked copy
    of the same view. Pass only the ``u`` arguments to score a single view.
    """
    mask_u = mask_u.mask if isinstance(mask_u, MaskSpec) else mask_u
    _check_finite(t_patch_u, s_patch_u)
    loss = _masked_mean_ce(t_patch_u, s_patch_u, mask_u, state, masked_only)
    if t_patch_v is not None:
        mask_v = mask_v.mask if isinstance(mask_v, MaskSpec) else mask_v
        _check_finite(t_patch_v, s_patch_v)
        loss = loss + _masked_mean_ce(t_patch_v, s_patch_v, mask_v, state, masked_only)
    return loss


@torch.no_grad()
def ema_update(state: DistillState, momentum: Optional[float] = None) -> DistillState:
    """teacher <- m * teacher + (1 - m) * student over every parameter and buffer."""
    m = state.momentum if momentum is None else momentum
    if not 0.0 <= m <= 1.0:
        raise InvariantError(f"momentum {m} outside [0, 1]")
    t_params = dict(state.teacher.named_parameters())
    s_params = dict(state.student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise InvariantError("teacher and student parameter names differ")
    for name, s in s_params.items():
        t = t_params[name]
        if t.shape != s.shape:
            raise InvariantError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.copy_(s)
        else:
            # t + (1 - m)(s - t): same update, but leaves t untouched where s == t
            t.lerp_(s.detach(), 1.0 - m)
    return state


@torch.no_grad()
def center_update(center: torch.Tensor, teacher_batch_logits: torch.Tensor, momentum_c: float) -> torch.Tensor:
    if teacher_batch_logits.shape[0] == 0:
        raise ConfigurationError("empty batch")
    batch_mean = teacher_batch_logits.reshape(-1, center.shape[-1]).mean(dim=0)
    return center * momentum_c + batch_mean * (1.0 - momentum_c)


def cosine_momentum(step: int, total_steps: int, base: float = 0.996, final: float = 1.0) -> float:
    if total_steps <= 1:
        return base
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return final - (final - base) * (math.cos(math.pi * frac) + 1.0) / 2.0


def entropy(logits: torch.Tensor, center=0.0, temp: float = 1.0) -> torch.Tensor:
    """Row-wise Shannon entropy of ``softmax((logits - center)/temp)``."""
    logp = torch.log_softmax((logits - center) / temp, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1)
