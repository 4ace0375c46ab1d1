"""Pre-training, fine-tuning and evaluation loops with archive checkpoints."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import augment
from .config import RunConfig
from .container import load_archive, save_archive
from .data import Sample
from .errors import CheckpointError, MissingLabelsError, NumericError
from .hand_model import HandModelData, ManoParams, forward_torch, project, regress_joints
from .mesh_head import HandMeshNet, finetune_loss, prediction_record
from .metrics import MetricReport, evaluate_arrays, write_curves_csv
from .mim import (
    DistillState,
    ProjectionHead,
    center_update,
    cosine_momentum,
    ema_update,
    entropy,
    patch_loss,
    pose_loss,
    sample_mask,
)
from .pose_align import align_batch, class_to_pseudo, flatten_pseudo, transform_tensors
from .recon import PyramidDecoder, recon_loss
from .vit import VisionTransformer

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# parameter / optimizer <-> named arrays


def module_arrays(module: nn.Module, prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Dict[str, np.ndarray], prefix: str, strict: bool = True):
    """Copy ``prefix/<name>`` arrays into ``module``; raise listing every mismatch."""
    state = module.state_dict()
    problems, new_state = [], {}
    for name, current in state.items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            if strict:
                problems.append(f"{key}: missing")
            continue
        a = arrays[key]
        if tuple(a.shape) != tuple(current.shape):
            problems.append(f"{key}: checkpoint {tuple(a.shape)} vs model {tuple(current.shape)}")
            continue
        new_state[name] = torch.as_tensor(a, dtype=current.dtype)
    if problems:
        raise CheckpointError("checkpoint does not match the model:\n  " + "\n  ".join(problems))
    module.load_state_dict(new_state, strict=strict)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str = "optim"):
    sd = opt.state_dict()
    arrays, dtypes = {}, {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            key = f"{prefix}/{idx}/{k}"
            t = torch.as_tensor(v)
            arrays[key] = t.detach().cpu().numpy()
            dtypes[key] = str(t.dtype).replace("torch.", "")
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return arrays, {"param_groups": groups, "dtypes": dtypes}


def load_optimizer(opt: torch.optim.Optimizer, arrays, meta, prefix: str = "optim"):
    state: Dict[int, dict] = {}
    for key, dt in meta["dtypes"].items():
        _, idx, name = key.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.as_tensor(arrays[key], dtype=getattr(torch, dt))
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in meta["param_groups"]]
    opt.load_state_dict({"state": state, "param_groups": groups})


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict):
    rng.bit_generator.state = state


def make_optimizer(params, cfg: RunConfig) -> torch.optim.Optimizer:
    o = cfg.optimizer
    params = list(params)
    if o.kind.lower() == "adamw":
        return torch.optim.AdamW(params, lr=o.lr, weight_decay=o.weight_decay)
    if o.kind.lower() == "adam":
        return torch.optim.Adam(params, lr=o.lr, weight_decay=o.weight_decay)
    if o.kind.lower() == "sgd":
        return torch.optim.SGD(params, lr=o.lr, weight_decay=o.weight_decay, momentum=0.9)
    raise ValueError(f"unknown optimizer kind {o.kind!r}")


def scheduled_lr(step: int, total_steps: int, steps_per_epoch: int, ocfg) -> float:
    """Linear warmup over ``warmup_epochs``, then constant or cosine decay to zero."""
    warm = ocfg.warmup_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return ocfg.lr * (step + 1) / warm
    if ocfg.schedule == "cosine" and total_steps > warm:
        frac = min((step - warm) / max(total_steps - warm, 1), 1.0)
        return ocfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return ocfg.lr


# ---------------------------------------------------------------------------
# pre-training


class PretrainNet(nn.Module):
    """Backbone with pose head, patch head and pixel decoder (the student layout)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        vc = cfg.vit_config
        d = cfg.distill
        self.backbone = VisionTransformer(vc)
        self.pose_head = ProjectionHead(vc.width, 2 * d.pseudo_count, d.head_hidden, d.head_bottleneck)
        self.patch_head = ProjectionHead(vc.width, d.patch_dim, d.head_hidden, d.head_bottleneck)
        self.decoder = PyramidDecoder(vc.width, vc.grid)


class Pretrainer:
    """Owns the distillation state, optimizer and RNG for one pre-training run."""

    def __init__(self, cfg: RunConfig, src_size: Optional[int] = None, total_steps: Optional[int] = None):
        self.cfg = cfg
        vc = cfg.vit_config
        self.src_size = src_size or vc.image_size
        torch.manual_seed(cfg.seed)
        student = PretrainNet(cfg)
        d = cfg.distill
        self.state = DistillState.from_student(
            student,
            2 * d.pseudo_count,
            d.patch_dim,
            momentum=cfg.ema.base,
            temp_teacher=d.temp_teacher,
            temp_student=d.temp_student,
            center_momentum=d.center_momentum,
        )
        self.optimizer = make_optimizer(student.parameters(), cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.aug_cfg = augment.AugmentConfig(out_size=vc.image_size)
        self.step = 0
        self.epoch = 0
        self.total_steps = total_steps or 1
        self.steps_per_epoch = 1

    @property
    def student(self) -> PretrainNet:
        return self.state.student

    @property
    def teacher(self) -> PretrainNet:
        return self.state.teacher

    def prepare_batch(self, images: np.ndarray):
        """Draw two views and a mask per view for every image."""
        vc = self.cfg.vit_config
        lo, hi = self.cfg.mask.ratio_range
        views = {"u": [], "v": []}
        xfs = {"u": [], "v": []}
        masks = {"u": [], "v": []}
        for img in images:
            vu, xu, vv, xv = augment.generate_views(img, self.rng, self.aug_cfg)
            for key, view, xf in (("u", vu, xu), ("v", vv, xv)):
                views[key].append(view)
                xfs[key].append(xf)
                masks[key].append(sample_mask(vc.num_patches, self.rng.uniform(lo, hi), self.rng, (lo, hi)).mask)
        return (
            {k: torch.as_tensor(np.stack(v), dtype=torch.float32) for k, v in views.items()},
            xfs,
            {k: torch.as_tensor(np.stack(v)) for k, v in masks.items()},
        )

    def _pose_logits(self, net: PretrainNet, cls, xfs):
        rot, scale, offset = transform_tensors(xfs, unit=float(self.src_size), dtype=cls.dtype)
        kp = class_to_pseudo(net.pose_head(cls), self.cfg.distill.pseudo_count)
        return flatten_pseudo(align_batch(kp, rot, scale, offset))

    def losses(self, views, xfs, masks):
        """Forward both branches on prepared inputs; returns term tensors and teacher logits."""
        st, te = self.student, self.teacher
        vc = self.cfg.vit_config
        with torch.no_grad():
            t_out = {k: te.backbone(views[k]) for k in ("u", "v")}
            t_pose = {k: self._pose_logits(te, t_out[k].class_token, xfs[k]) for k in ("u", "v")}
            t_patch = {k: te.patch_head(t_out[k].patch_tokens) for k in ("u", "v")}
        s_out = {k: st.backbone(views[k], masks[k]) for k in ("u", "v")}
        s_pose = {k: self._pose_logits(st, s_out[k].class_token, xfs[k]) for k in ("u", "v")}
        s_patch = {k: st.patch_head(s_out[k].patch_tokens) for k in ("u", "v")}
        l_pose = pose_loss(t_pose["u"], t_pose["v"], s_pose["u"], s_pose["v"], self.state)
        l_patch = patch_loss(
            t_patch["u"], s_patch["u"], masks["u"], self.state, t_patch["v"], s_patch["v"], masks["v"],
            masked_only=self.cfg.distill.masked_only,
        )
        recon = [recon_loss(st.decoder(s_out[k].taps), views[k], masks[k], vc.patch_size) for k in ("u", "v")]
        l_recon = 0.5 * (recon[0] + recon[1])
        return {"pose": l_pose, "patch": l_patch, "recon": l_recon}, t_pose, t_patch

    def pretrain_step(self, images: np.ndarray, batch_id: str = "") -> Dict[str, float]:
        views, xfs, masks = self.prepare_batch(images)
        self.student.train()
        terms, t_pose, t_patch = self.losses(views, xfs, masks)
        w_pose, w_patch, w_recon = self.cfg.loss.pretrain
        total = w_pose * terms["pose"] + w_patch * terms["patch"] + w_recon * terms["recon"]
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {self.step} (batch {batch_id or self.step}): "
                + ", ".join(f"{k}={float(v.detach())}" for k, v in terms.items())
            )
        for g in self.optimizer.param_groups:
            g["lr"] = scheduled_lr(self.step, self.total_steps, self.steps_per_epoch, self.cfg.optimizer)
        self.optimizer.zero_grad(set_to_none=False)
        total.backward()
        self.optimizer.step()
        m = cosine_momentum(self.step, self.total_steps, self.cfg.ema.base, self.cfg.ema.final)
        ema_update(self.state, m)
        with torch.no_grad():
            t_all = torch.cat([t_pose["u"], t_pose["v"]])
            ent = float(entropy(t_all, self.state.center_pose, self.state.temp_teacher).mean())
            cm = self.state.center_momentum
            self.state.center_pose = center_update(self.state.center_pose, t_all, cm)
            self.state.center_patch = center_update(
                self.state.center_patch, torch.cat([t_patch["u"], t_patch["v"]]), cm
            )
        self.step += 1
        out = {k: float(v.detach()) for k, v in terms.items()}
        out["total"] = float(total.detach())
        out["teacher_entropy"] = ent
        out["momentum"] = m
        return out

    def train_epoch(self, images: np.ndarray) -> Dict[str, float]:
        bs = self.cfg.optimizer.batch_size
        order = self.rng.permutation(len(images))
        rows = []
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            rows.append(self.pretrain_step(images[idx], batch_id=f"epoch{self.epoch}:{start // bs}"))
        self.epoch += 1
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}

    def fit(self, images: np.ndarray, epochs: Optional[int] = None, callback: Callable = None) -> List[dict]:
        epochs = epochs or self.cfg.optimizer.epochs
        self.steps_per_epoch = math.ceil(len(images) / self.cfg.optimizer.batch_size)
        if self.step == 0:
            self.total_steps = epochs * self.steps_per_epoch
        history = []
        for _ in range(epochs):
            row = self.train_epoch(images)
            row["epoch"] = self.epoch
            history.append(row)
            log.info("epoch %d %s", self.epoch, {k: round(v, 4) for k, v in row.items()})
            if callback:
                callback(row)
        return history

    # checkpoint

    def save(self, path) -> Path:
        arrays = module_arrays(self.student, "student")
        arrays.update(module_arrays(self.teacher, "teacher"))
        arrays["center/pose"] = self.state.center_pose.numpy()
        arrays["center/patch"] = self.state.center_patch.numpy()
        opt_arrays, opt_meta = optimizer_arrays(self.optimizer)
        arrays.update(opt_arrays)
        meta = {
            "kind": "pretrain",
            "config": self.cfg.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "steps_per_epoch": self.steps_per_epoch,
            "src_size": self.src_size,
            "rng": _rng_state(self.rng),
            "optimizer": opt_meta,
        }
        return save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Pretrainer":
        arrays, meta = load_archive(path)
        if meta.get("kind") != "pretrain":
            raise CheckpointError(f"{path} is not a pre-training checkpoint")
        cfg = RunConfig.from_dict(meta["config"])
        self = cls(cfg, meta["src_size"], meta["total_steps"])
        load_module_arrays(self.student, arrays, "student")
        load_module_arrays(self.teacher, arrays, "teacher")
        self.state.center_pose = torch.as_tensor(arrays["center/pose"], dtype=torch.float32)
        self.state.center_patch = torch.as_tensor(arrays["center/patch"], dtype=torch.float32)
        load_optimizer(self.optimizer, arrays, meta["optimizer"])
        _set_rng_state(self.rng, meta["rng"])
        self.step, self.epoch = meta["step"], meta["epoch"]
        self.steps_per_epoch = meta["steps_per_epoch"]
        return self


def teacher_backbone_arrays(path) -> Dict[str, np.ndarray]:
    """Backbone weights of a pre-training checkpoint's EMA teacher, keyed ``backbone/<name>``."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "pretrain":
        raise CheckpointError(f"{path} is not a pre-training checkpoint")
    pre = "teacher/backbone."
    return {"backbone/" + k[len(pre) :]: v for k, v in arrays.items() if k.startswith(pre)}


# ---------------------------------------------------------------------------
# fine-tuning


def stack_samples(samples: Sequence[Sample], dtype=torch.float32):
    """Batch tensors for labeled samples."""
    if any(not s.labeled for s in samples):
        raise MissingLabelsError("samples without 3D labels")
    as_t = lambda xs: torch.as_tensor(np.stack(xs), dtype=dtype)
    batch = {
        "images": as_t([s.image for s in samples]),
        "K": as_t([s.K for s in samples]),
        "verts": as_t([s.verts for s in samples]),
        "j3d": as_t([s.j3d for s in samples]),
        "j2d": as_t([s.j2d for s in samples]),
        "params": None,
    }
    if all(s.params is not None for s in samples):
        batch["params"] = ManoParams(*(as_t([getattr(s.params, f) for s in samples]) for f in ManoParams._fields))
    return batch


class Finetuner:
    """Supervised training of backbone + mesh head, optionally from pre-trained weights."""

    def __init__(
        self,
        cfg: RunConfig,
        model: HandModelData,
        pretrained: Optional[Dict[str, np.ndarray]] = None,
    ):
        self.cfg = cfg
        self.hand = model
        torch.manual_seed(cfg.seed)
        self.net = HandMeshNet(cfg.vit_config, model)
        self.pretrained = pretrained is not None
        if pretrained is not None:
            load_module_arrays(self.net.backbone, pretrained, "backbone")
        self.frozen = self.net.backbone.frozen_parameters(cfg.freeze_blocks)
        frozen_ids = {id(p) for p in self.frozen}
        for p in self.frozen:
            p.requires_grad_(False)
        self.trainable = [p for p in self.net.parameters() if id(p) not in frozen_ids]
        self.optimizer = make_optimizer(self.trainable, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.steps_per_epoch = 1
        self.total_steps = 1

    def _lr(self) -> float:
        return scheduled_lr(self.step, self.total_steps, self.steps_per_epoch, self.cfg.optimizer)

    def loss(self, batch):
        history = self.net(batch["images"], batch["K"])
        weights = self.cfg.loss.finetune
        totals, last_terms = [], None
        for pred in history:
            total, terms = finetune_loss(
                pred, batch["params"], batch["verts"], batch["j3d"], batch["j2d"], batch["K"], self.hand, weights,
                image_size=self.cfg.vit_config.image_size,
            )
            totals.append(total)
            last_terms = terms
        return torch.stack(totals).mean(), last_terms

    def train_step(self, samples: Sequence[Sample]) -> Dict[str, float]:
        self.net.train()
        batch = stack_samples(samples)
        total, terms = self.loss(batch)
        if not torch.isfinite(total):
            raise NumericError(f"non-finite fine-tune loss at step {self.step}")
        for g in self.optimizer.param_groups:
            g["lr"] = self._lr()
        self.optimizer.zero_grad(set_to_none=False)
        total.backward()
        self.optimizer.step()
        self.step += 1
        out = {k: float(v.detach()) for k, v in terms.items()}
        out["total"] = float(total.detach())
        return out

    def train_epoch(self, samples: Sequence[Sample]) -> Dict[str, float]:
        bs = self.cfg.optimizer.batch_size
        self.steps_per_epoch = math.ceil(len(samples) / bs)
        order = self.rng.permutation(len(samples))
        rows = [self.train_step([samples[i] for i in order[s : s + bs]]) for s in range(0, len(order), bs)]
        self.epoch += 1
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}

    def fit(self, samples: Sequence[Sample], epochs: Optional[int] = None) -> List[dict]:
        epochs = epochs or self.cfg.optimizer.epochs
        self.steps_per_epoch = math.ceil(len(samples) / self.cfg.optimizer.batch_size)
        if self.step == 0:
            self.total_steps = epochs * self.steps_per_epoch
        history = []
        for _ in range(epochs):
            row = self.train_epoch(samples)
            row["epoch"] = self.epoch
            history.append(row)
            log.info("finetune epoch %d total %.4f", self.epoch, row["total"])
        return history

    @torch.no_grad()
    def predict(self, samples: Sequence[Sample], batch_size: int = 64) -> ManoParams:
        self.net.eval()
        outs = []
        for s in range(0, len(samples), batch_size):
            chunk = samples[s : s + batch_size]
            images = torch.as_tensor(np.stack([x.image for x in chunk]), dtype=torch.float32)
            K = torch.as_tensor(np.stack([x.K for x in chunk]), dtype=torch.float32)
            outs.append(self.net(images, K)[-1])
        return ManoParams(*(torch.cat([o[i] for o in outs]).double().numpy() for i in range(3)))

    def save(self, path) -> Path:
        arrays = module_arrays(self.net, "net")
        opt_arrays, opt_meta = optimizer_arrays(self.optimizer)
        arrays.update(opt_arrays)
        meta = {
            "kind": "finetune",
            "config": self.cfg.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "steps_per_epoch": self.steps_per_epoch,
            "total_steps": self.total_steps,
            "pretrained": self.pretrained,
            "rng": _rng_state(self.rng),
            "optimizer": opt_meta,
            "hand_model": self.hand.meta.get("name", ""),
        }
        return save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path, model: HandModelData) -> "Finetuner":
        arrays, meta = load_archive(path)
        if meta.get("kind") != "finetune":
            raise CheckpointError(f"{path} is not a fine-tuning checkpoint")
        self = cls(RunConfig.from_dict(meta["config"]), model)
        load_module_arrays(self.net, arrays, "net")
        load_optimizer(self.optimizer, arrays, meta["optimizer"])
        _set_rng_state(self.rng, meta["rng"])
        self.step, self.epoch = meta["step"], meta["epoch"]
        self.steps_per_epoch = meta["steps_per_epoch"]
        self.total_steps = meta["total_steps"]
        self.pretrained = meta["pretrained"]
        return self


# ---------------------------------------------------------------------------
# evaluation


def predict_geometry(params: ManoParams, Ks, model: HandModelData):
    """Vertices, 3D and 2D keypoints for stacked numpy parameters."""
    theta = torch.as_tensor(params.theta, dtype=torch.float64)
    beta = torch.as_tensor(params.beta, dtype=torch.float64)
    verts = forward_torch(model, theta, beta)
    j3d = regress_joints(model, verts)
    j2d = project(j3d, torch.as_tensor(params.t, dtype=torch.float64), torch.as_tensor(np.asarray(Ks)), strict=False)
    return verts.numpy(), j3d.numpy(), j2d.numpy()


def evaluate(
    samples: Sequence[Sample],
    predict: Callable[[Sequence[Sample]], ManoParams],
    model: HandModelData,
    out_dir=None,
) -> MetricReport:
    """Score ``predict`` on labeled samples; optionally write metrics, curves and predictions."""
    if any(not s.labeled for s in samples):
        raise MissingLabelsError("evaluation requires 3D labels on every sample")
    params = predict(samples)
    Ks = np.stack([s.K for s in samples]) if samples else np.zeros((0, 3, 3))
    verts, j3d, j2d = predict_geometry(params, Ks, model)
    gt_j3d = np.stack([s.j3d for s in samples])
    gt_verts = np.stack([s.verts for s in samples])
    report, joint_errs, vert_errs = evaluate_arrays(j3d, gt_j3d, verts, gt_verts)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "metrics.json")
        write_curves_csv(out / "curves.csv", joint_errs, vert_errs)
        with open(out / "predictions.jsonl", "w") as fh:
            for i, s in enumerate(samples):
                p = ManoParams(params.theta[i], params.beta[i], params.t[i])
                fh.write(prediction_record(s.id, p, verts[i], j3d[i], j2d[i]) + "\n")
    return report


def oracle_predictor(samples: Sequence[Sample]) -> ManoParams:
    """Returns the ground-truth parameters; a sanity reference for :func:`evaluate`."""
    return ManoParams(*(np.stack([getattr(s.params, f) for s in samples]) for f in ManoParams._fields))
