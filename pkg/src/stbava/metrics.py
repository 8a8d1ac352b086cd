"""mIoU (Jaccard) and F-score with beta^2 = 0.3, plus report assembly.

Per-frame conventions: a frame where both prediction and ground truth are
empty scores 1.0 for IoU and F; an empty prediction against a non-empty
ground truth (or the reverse) scores 0.0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

BETA2 = 0.3


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def _check_binary(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred dims {list(pred.shape)} != gt dims {list(gt.shape)}")
    for name, a in (("pred", pred), ("gt", gt)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} is not a binary mask")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return pred.astype(bool), gt.astype(bool)


def _counts(pred, gt):
    axes = tuple(range(1, pred.ndim))
    tp = (pred & gt).sum(axis=axes).astype(np.float64)
    fp = (pred & ~gt).sum(axis=axes).astype(np.float64)
    fn = (~pred & gt).sum(axis=axes).astype(np.float64)
    return tp, fp, fn


def frame_ious(pred, gt) -> np.ndarray:
    pred, gt = _check_binary(pred, gt)
    tp, fp, fn = _counts(pred, gt)
    union = tp + fp + fn
    return np.where(union == 0, 1.0, tp / np.maximum(union, 1.0))


def frame_prf(pred, gt, beta2: float = BETA2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame precision, recall and F."""
    pred, gt = _check_binary(pred, gt)
    tp, fp, fn = _counts(pred, gt)
    both_empty = (tp + fp + fn) == 0
    precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1.0), 0.0)
    recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1.0), 0.0)
    denom = beta2 * precision + recall
    f = np.where(denom > 0, (1 + beta2) * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    precision = np.where(both_empty, 1.0, precision)
    recall = np.where(both_empty, 1.0, recall)
    f = np.where(both_empty, 1.0, f)
    return precision, recall, f


def miou(pred, gt) -> float:
    return float(frame_ious(pred, gt).mean())


def fscore(pred, gt, beta2: float = BETA2) -> float:
    return float(frame_prf(pred, gt, beta2)[2].mean())


@dataclass
class ClipScore:
    id: str
    miou: float
    fscore: float
    precision: float
    recall: float
    frame_iou: list = field(default_factory=list)


@dataclass
class EvalReport:
    miou: float
    fscore: float
    precision: float
    recall: float
    clips: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(preds, gts, ids=None, config: dict | None = None, beta2: float = BETA2) -> EvalReport:
    """Per-clip frame means, then unweighted mean over clips."""
    clips = []
    for k, (p, g) in enumerate(zip(preds, gts)):
        ious = frame_ious(p, g)
        prec, rec, f = frame_prf(p, g, beta2)
        clips.append(
            ClipScore(
                id=ids[k] if ids is not None else f"clip_{k:05d}",
                miou=float(ious.mean()),
                fscore=float(f.mean()),
                precision=float(prec.mean()),
                recall=float(rec.mean()),
                frame_iou=[float(v) for v in ious],
            )
        )
    if not clips:
        raise ValueError("no clips to evaluate")
    agg = {k: float(np.mean([getattr(c, k) for c in clips])) for k in ("miou", "fscore", "precision", "recall")}
    return EvalReport(**agg, clips=[asdict(c) for c in clips], config=config or {})
