"""scikit-learn style wrapper around :class:`AvsModel`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as tn
from .config import StBavaConfig
from .data import AvClip
from .metrics import binarize, miou
from .model import AvsModel
from .train import fit as fit_model
from .validation import as_clip_arrays, check_clip_arrays, check_masks


class AudioVisualSegmenter(BaseEstimator):
    """Segments sounding objects in clips.

    ``X`` is either a ``(frames, specs)`` pair of arrays shaped
    ``[N, T, 3, H, W]`` and ``[N, T, Hs, Ws]`` or a list of clips; ``y`` holds
    binary masks ``[N, T, H, W]``.
    """

    def __init__(self, depth=5, channels=64, heads=4, order="temporal-first", no_temporal=False,
                 no_bidirectional=False, no_adapter=False, unfreeze_encoders=False, two_phase=False,
                 upsample="subpixel", lr=1e-4, epochs=30, batch=4, threshold=0.5, seed=0):
        self.depth = depth
        self.channels = channels
        self.heads = heads
        self.order = order
        self.no_temporal = no_temporal
        self.no_bidirectional = no_bidirectional
        self.no_adapter = no_adapter
        self.unfreeze_encoders = unfreeze_encoders
        self.two_phase = two_phase
        self.upsample = upsample
        self.lr = lr
        self.epochs = epochs
        self.batch = batch
        self.threshold = threshold
        self.seed = seed

    def _config(self) -> StBavaConfig:
        return StBavaConfig(**self.get_params())

    def fit(self, X, y=None, X_val=None, y_val=None):
        frames, specs = as_clip_arrays(X)
        if y is None:
            y = np.stack([c.masks for c in X])
        cfg = self._config()
        check_clip_arrays(frames, specs, cfg)
        masks = check_masks(y, len(frames), cfg)
        clips = [AvClip(f, s, m, {}) for f, s, m in zip(frames, specs, masks)]
        val = None
        if X_val is not None:
            vf, vs = as_clip_arrays(X_val)
            check_clip_arrays(vf, vs, cfg)
            vm = check_masks(y_val, len(vf), cfg)
            val = [AvClip(f, s, m, {}) for f, s, m in zip(vf, vs, vm)]
        model = AvsModel(cfg)
        model.set_requires_grad()
        _, self.history_, best = fit_model(model, clips, val)
        model.load_state(best["weights"])
        self.model_ = model
        self.best_epoch_ = best["epoch"]
        return self

    def decision_function(self, X) -> np.ndarray:
        """Per-pixel logits ``[N, T, H, W]``."""
        check_is_fitted(self, "model_")
        frames, specs = as_clip_arrays(X)
        check_clip_arrays(frames, specs, self.model_.cfg)
        out = [self.model_.forward(frames[i : i + 8], specs[i : i + 8])[0].data for i in range(0, len(frames), 8)]
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        return tn.sigmoid_np(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y=None) -> float:
        """Mean per-clip mIoU."""
        if y is None:
            y = np.stack([c.masks for c in X])
        pred = self.predict(X)
        y = np.asarray(y)
        return float(np.mean([miou(p, g) for p, g in zip(pred, y)]))
