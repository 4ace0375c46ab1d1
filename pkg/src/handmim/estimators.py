"""scikit-learn style wrappers around pre-training and fine-tuning.

``HandMIMPretrainer`` learns from unlabeled crops and transforms images into
class-token features of the EMA teacher. ``HandMeshRegressor`` fits on labeled
:class:`~handmim.data.Sample` lists and predicts 21 keypoints per image;
``score`` is the negative PA-aligned joint error in millimeters.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .data import Sample
from .errors import ConfigurationError, MissingLabelsError
from .hand_model import HandModelData, ManoParams, synhand
from .metrics import evaluate_arrays
from .trainer import Finetuner, Pretrainer, predict_geometry, teacher_backbone_arrays

ABLATABLE = ("pose", "patch", "recon")


def check_images(X, size: Optional[int] = None) -> np.ndarray:
    """Validate an image batch ``[N, H, W, 3]`` with values in ``[0, 1]``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ConfigurationError(f"expected square RGB images [N, H, W, 3], got {X.shape}")
    if size is not None and X.shape[1] != size:
        raise ConfigurationError(f"expected {size}x{size} images, got {X.shape[1]}x{X.shape[2]}")
    if X.min() < 0 or X.max() > 1:
        raise ConfigurationError("pixel values must lie in [0, 1]")
    return X


def check_samples(samples, labeled: bool = True) -> list:
    samples = list(samples)
    if not samples or not all(isinstance(s, Sample) for s in samples):
        raise ConfigurationError("expected a non-empty sequence of Sample objects")
    if labeled and not all(s.labeled for s in samples):
        raise MissingLabelsError("every sample needs 3D labels")
    return samples


class HandMIMPretrainer(BaseEstimator, TransformerMixin):
    def __init__(self, vit="toy", epochs=50, batch_size=32, lr=2e-3, seed=0, ablate=(), overrides=None):
        self.vit = vit
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.ablate = ablate
        self.overrides = overrides

    def _config(self) -> RunConfig:
        cfg = RunConfig.for_mode("pretrain", **dict(self.overrides or {}))
        cfg.vit = self.vit
        cfg.seed = self.seed
        cfg.optimizer.epochs = self.epochs
        cfg.optimizer.batch_size = self.batch_size
        cfg.optimizer.lr = self.lr
        for term in self.ablate:
            if term not in ABLATABLE:
                raise ConfigurationError(f"cannot ablate {term!r}; choose from {ABLATABLE}")
            setattr(cfg.loss, f"w_{term}", 0.0)
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        cfg = self._config()
        X = check_images(X, cfg.vit_config.image_size)
        self.trainer_ = Pretrainer(cfg, src_size=X.shape[1])
        self.history_ = self.trainer_.fit(X, cfg.optimizer.epochs)
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "trainer_")
        X = check_images(X, self.trainer_.cfg.vit_config.image_size)
        backbone = self.trainer_.teacher.backbone.eval()
        return backbone(torch.as_tensor(X, dtype=torch.float32)).class_token.double().numpy()

    def save(self, path):
        check_is_fitted(self, "trainer_")
        return self.trainer_.save(path)


class HandMeshRegressor(BaseEstimator, RegressorMixin):
    def __init__(
        self,
        vit="toy",
        epochs=100,
        batch_size=32,
        lr=4e-5,
        warmup_epochs=5,
        seed=0,
        freeze_blocks=0,
        pretrained=None,
        hand_model=None,
        overrides=None,
    ):
        self.vit = vit
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.seed = seed
        self.freeze_blocks = freeze_blocks
        self.pretrained = pretrained
        self.hand_model = hand_model
        self.overrides = overrides

    def _config(self) -> RunConfig:
        cfg = RunConfig.for_mode("finetune", **dict(self.overrides or {}))
        cfg.vit = self.vit
        cfg.seed = self.seed
        cfg.freeze_blocks = self.freeze_blocks
        cfg.optimizer.epochs = self.epochs
        cfg.optimizer.batch_size = self.batch_size
        cfg.optimizer.lr = self.lr
        cfg.optimizer.warmup_epochs = self.warmup_epochs
        cfg.validate()
        return cfg

    def _hand(self) -> HandModelData:
        if self.hand_model is None:
            return synhand()
        if isinstance(self.hand_model, HandModelData):
            return self.hand_model
        return HandModelData.load(self.hand_model)

    def fit(self, X: Sequence[Sample], y=None):
        samples = check_samples(X)
        cfg = self._config()
        check_images(np.stack([s.image for s in samples[:1]]), cfg.vit_config.image_size)
        pre = self.pretrained
        if pre is not None and not isinstance(pre, dict):
            pre = teacher_backbone_arrays(pre)
        self.hand_ = self._hand()
        self.trainer_ = Finetuner(cfg, self.hand_, pre)
        self.history_ = self.trainer_.fit(samples, cfg.optimizer.epochs)
        return self

    def predict_params(self, X: Sequence[Sample]) -> ManoParams:
        check_is_fitted(self, "trainer_")
        return self.trainer_.predict(check_samples(X, labeled=False))

    def predict(self, X: Sequence[Sample]) -> np.ndarray:
        """3D keypoints ``[N, 21, 3]`` in the model frame (meters)."""
        samples = check_samples(X, labeled=False)
        params = self.predict_params(samples)
        _, j3d, _ = predict_geometry(params, np.stack([s.K for s in samples]), self.hand_)
        return j3d

    def score(self, X: Sequence[Sample], y=None, sample_weight=None) -> float:
        samples = check_samples(X)
        params = self.predict_params(samples)
        verts, j3d, _ = predict_geometry(params, np.stack([s.K for s in samples]), self.hand_)
        report, _, _ = evaluate_arrays(j3d, np.stack([s.j3d for s in samples]), verts, np.stack([s.verts for s in samples]))
        return -report.pajpe

    def save(self, path):
        check_is_fitted(self, "trainer_")
        return self.trainer_.save(path)
