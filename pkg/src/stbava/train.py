"""Adam, the training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .config import StBavaConfig
from .data import AvClip, generate_clip, load_split, read_manifest, split_of
from .io import read_checkpoint, write_checkpoint
from .metrics import binarize, evaluate
from .model import AvsModel

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
TWO_PHASE_JOINT_EPOCHS = 15


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, b1=BETA1, b2=BETA2, eps=ADAM_EPS) -> AdamState:
    """In-place bias-corrected Adam update of every parameter that has a gradient."""
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= k
    return norm


def stack_clips(clips: Sequence[AvClip]):
    return (
        np.stack([c.frames for c in clips]),
        np.stack([c.specs for c in clips]),
        np.stack([c.masks for c in clips]),
    )


def predict_logits(model: AvsModel, clips: Sequence[AvClip], batch: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(clips), batch):
        f, s, _ = stack_clips(clips[i : i + batch])
        logits, _ = model.forward(f, s)
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def evaluate_model(model: AvsModel, clips: Sequence[AvClip], threshold: float | None = None):
    threshold = model.cfg.threshold if threshold is None else threshold
    logits = predict_logits(model, clips)
    preds = binarize(tn.sigmoid_np(logits.astype(np.float64)), threshold)
    ids = [c.meta.get("id", f"clip_{k:05d}") for k, c in enumerate(clips)]
    return evaluate(preds, [c.masks for c in clips], ids=ids, config=model.cfg.to_dict())


def train_step(model: AvsModel, clips: Sequence[AvClip], state: AdamState, lr: float, exclude: set = frozenset()) -> float:
    frames, specs, masks = stack_clips(clips)
    params = {n: p for n, p in model.trainable().items() if n not in exclude}
    for p in model.params().values():
        p.grad = None
        p.requires_grad = p.name in params
    with tn.Tape() as tape:
        loss, _, _ = model.loss(frames, specs, masks)
        tape.backward(loss)
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    clip_grads(grads, model.cfg.clip_norm)
    adam_step(params, grads, state, lr)
    for p in model.params().values():
        p.grad = None
    return float(loss.data)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def fit(
    model: AvsModel,
    train_clips: Sequence[AvClip],
    val_clips: Sequence[AvClip] | None = None,
    state: AdamState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[AdamState, list[dict], dict]:
    """Train for ``cfg.epochs``; returns (adam state, per-epoch log, best snapshot).

    The best snapshot holds the weights, Adam state and epoch with the best
    validation mIoU (the last epoch when no validation clips are given).
    """
    cfg = model.cfg
    state = state or AdamState()
    history = []
    best = None
    adapters = model.adapters
    joint_from = max(cfg.epochs - TWO_PHASE_JOINT_EPOCHS, cfg.epochs // 2) if cfg.two_phase else 0
    adapter_names = {n for n in model.params() if n.startswith("adapters.")}
    for epoch in range(cfg.epochs):
        staged = cfg.two_phase and epoch < joint_from
        model.adapters = [] if staged else adapters
        exclude = adapter_names if staged else set()
        order = epoch_order(cfg.seed, epoch, len(train_clips))
        losses = []
        for i in range(0, len(order), cfg.batch):
            batch = [train_clips[j] for j in order[i : i + cfg.batch]]
            losses.append(train_step(model, batch, state, cfg.lr, exclude))
        model.adapters = adapters
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if val_clips:
            rep = evaluate_model(model, val_clips)
            row["val_miou"] = rep.miou
            row["val_fscore"] = rep.fscore
        history.append(row)
        log.info("epoch %d loss %.4f val_miou %s", row["epoch"], row["loss"], row.get("val_miou"))
        if on_epoch:
            on_epoch(row)
        score = row.get("val_miou", float(epoch))
        if best is None or score > best["score"]:
            best = {
                "score": score,
                "epoch": epoch + 1,
                "weights": {n: a.copy() for n, a in model.state().items()},
                "adam": (state.step, {n: a.copy() for n, a in state.m.items()}, {n: a.copy() for n, a in state.v.items()}),
            }
    model.set_requires_grad()
    return state, history, best


def save_checkpoint(path, model: AvsModel, epoch: int, state: AdamState | None = None, weights: dict | None = None) -> None:
    weights = model.state() if weights is None else weights
    tensors = {f"param/{n}": a for n, a in weights.items()}
    step = 0
    if state is not None:
        step = state.step
        tensors.update({f"adam.m/{n}": a for n, a in state.m.items()})
        tensors.update({f"adam.v/{n}": a for n, a in state.v.items()})
    meta = {"config": model.cfg.to_dict(), "epoch": int(epoch), "adam_step": int(step)}
    write_checkpoint(path, tensors, meta)


def load_checkpoint(path) -> tuple[AvsModel, AdamState, dict]:
    tensors, meta = read_checkpoint(path)
    cfg = StBavaConfig.from_dict(meta["config"])
    model = AvsModel(cfg)
    model.load_state({n[len("param/") :]: a for n, a in tensors.items() if n.startswith("param/")})
    state = AdamState(
        step=meta.get("adam_step", 0),
        m={n[len("adam.m/") :]: a for n, a in tensors.items() if n.startswith("adam.m/")},
        v={n[len("adam.v/") :]: a for n, a in tensors.items() if n.startswith("adam.v/")},
    )
    return model, state, meta


def train(cfg: StBavaConfig, data_dir, out_dir) -> dict:
    """Train from a dataset directory; writes ``checkpoint.stbc`` (best val) and ``train_log.jsonl``."""
    read_manifest(data_dir)
    train_clips = load_split(data_dir, "train")
    val_clips = load_split(data_dir, "val")
    if not train_clips:
        raise ValueError(f"no training clips in {data_dir}")
    os.makedirs(out_dir, exist_ok=True)
    model = AvsModel(cfg)
    model.set_requires_grad()
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w") as fh:
        fh.write(json.dumps({"event": "params", "total": model.param_count(), "trainable": model.param_count(True),
                             "trainable_fraction": model.param_count(True) / model.param_count()}) + "\n")

        def write_row(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        state, history, best = fit(model, train_clips, val_clips, on_epoch=write_row)
    step, m, v = best["adam"]
    ckpt = os.path.join(out_dir, "checkpoint.stbc")
    save_checkpoint(ckpt, model, best["epoch"], AdamState(step, m, v), weights=best["weights"])
    return {"checkpoint": ckpt, "log": log_path, "best_epoch": best["epoch"], "history": history}


def run_experiment(cfg: StBavaConfig, mode: str, n_clips: int, data_seed: int | None = None) -> dict:
    """Generate ``n_clips`` in memory, train on the 80% split, report test scores of the best-val weights."""
    data_seed = cfg.seed if data_seed is None else data_seed
    clips = {"train": [], "val": [], "test": []}
    for k in range(n_clips):
        c = generate_clip(mode, data_seed, cfg, index=k)
        c.meta["id"] = f"clip_{k:05d}"
        clips[split_of(k, n_clips)].append(c)
    model = AvsModel(cfg)
    model.set_requires_grad()
    _, history, best = fit(model, clips["train"], clips["val"])
    model.load_state(best["weights"])
    rep = evaluate_model(model, clips["test"])
    return {"test_miou": rep.miou, "test_fscore": rep.fscore, "best_epoch": best["epoch"], "history": history}
