"""sklearn-style facade over the pipeline: fit on (volumes, masks), predict masks.

Thin composition layer — sampling, training, inference and postprocessing all
live in their own modules; this class wires them behind the usual
fit/predict/predict_proba/score + get_params/set_params surface so the model
drops into sklearn tooling (cloning, grid search over thresholds, etc.).
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from sklearn.base import BaseEstimator

from .inference import predict_volume
from .losses import LossConfig, ThetaSchedule
from .metrics import dsc_volume
from .network import CamUNetConfig, load_checkpoint
from .postprocess import PostprocessConfig, extract_proposals, proposals_to_mask
from .sampling import plan_samples, build_cache
from .training import TrainConfig, train
from .volume_io import CtVolume, FractureMask


class RibFractureSegmenter(BaseEstimator):
    """CAM-gated 3D UNet rib-fracture segmenter with patch-level classifier."""

    def __init__(self, patch_edge=128, channels=(16, 32, 64, 128),
                 classifier_enabled=True, lr=1e-3, weight_decay=0.01,
                 batch_size=16, epochs=100, jitter=16, stride=64,
                 prob_threshold=0.6, size_threshold=150, seed=0, work_dir=None):
        self.patch_edge = patch_edge
        self.channels = channels
        self.classifier_enabled = classifier_enabled
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.jitter = jitter
        self.stride = stride
        self.prob_threshold = prob_threshold
        self.size_threshold = size_threshold
        self.seed = seed
        self.work_dir = work_dir

    # -- input validation helpers ------------------------------------------
    def _coerce_volumes(self, X):
        out = []
        for i, x in enumerate(X):
            if isinstance(x, CtVolume):
                out.append(x)
            else:
                arr = np.asarray(x)
                if arr.ndim != 3:
                    raise ValueError(f"X[{i}] must be a 3-D array or CtVolume, "
                                     f"got ndim={arr.ndim}")
                out.append(CtVolume(arr.astype(np.float32), volume_id=f"vol{i:03d}"))
        return out

    def _coerce_masks(self, y, volumes):
        out = []
        for i, m in enumerate(y):
            mask = m if isinstance(m, FractureMask) else FractureMask(
                np.asarray(m).astype(np.int32), volumes[i].volume_id)
            if mask.shape != volumes[i].shape:
                raise ValueError(f"y[{i}] shape {mask.shape} != X[{i}] shape "
                                 f"{volumes[i].shape}")
            out.append(mask)
        return out

    # -- estimator API ------------------------------------------------------
    def fit(self, X, y):
        if len(X) != len(y):
            raise ValueError(f"len(X)={len(X)} != len(y)={len(y)}")
        if len(X) == 0:
            raise ValueError("need at least one volume")
        volumes = self._coerce_volumes(X)
        masks = self._coerce_masks(y, volumes)
        work = self.work_dir or tempfile.mkdtemp(prefix="fracseg-fit-")
        lookup, plans = {}, []
        for i, (vol, msk) in enumerate(zip(volumes, masks)):
            vid = vol.volume_id or f"vol{i:03d}"
            vol.volume_id = vid
            lookup[vid] = (vol, msk)
            plans.append(plan_samples(vol, msk, jitter=self.jitter,
                                      seed=self.seed + i,
                                      patch_edge=self.patch_edge))
        manifest = build_cache(plans, os.path.join(work, "cache"), lookup)
        cfg = TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            loss=LossConfig(schedule=ThetaSchedule(total_epochs=self.epochs)),
            model=CamUNetConfig(channels=tuple(self.channels),
                                classifier_enabled=self.classifier_enabled,
                                patch_edge=self.patch_edge),
            cache_manifest=manifest, val_manifest=manifest,
            out_dir=os.path.join(work, "run"),
        )
        self.checkpoint_path_, self.history_ = train(cfg)
        self.model_, _ = load_checkpoint(self.checkpoint_path_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit(X, y) first")

    def predict_proba(self, X):
        """Per-volume probability fields (list of float32 (W,H,D) arrays)."""
        self._check_fitted()
        return [predict_volume(self.model_, v, stride=self.stride)
                for v in self._coerce_volumes(X)]

    def predict(self, X):
        """Postprocessed binary masks (list of uint8 (W,H,D) arrays)."""
        self._check_fitted()
        volumes = self._coerce_volumes(X)
        cfg = PostprocessConfig(prob_threshold=self.prob_threshold,
                                size_threshold=self.size_threshold)
        out = []
        for vol in volumes:
            field = predict_volume(self.model_, vol, stride=self.stride)
            proposals = extract_proposals(field, vol, cfg)
            out.append(proposals_to_mask(proposals, vol.shape))
        return out

    def score(self, X, y):
        """Mean DSC of postprocessed predictions against the masks."""
        preds = self.predict(X)
        volumes = self._coerce_volumes(X)
        masks = self._coerce_masks(y, volumes)
        return float(np.mean([dsc_volume(p, m.binary())
                              for p, m in zip(preds, masks)]))
