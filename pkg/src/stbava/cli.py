"""Command-line entry point. Reports go to stdout as JSON, diagnostics to stderr.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import StBavaConfig
from .data import MODES, build_dataset, load_clip, read_manifest, load_split
from .io import write_tensor


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stbava", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=200)
    g.add_argument("--mode", choices=MODES, default="single")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--image-size", type=_size, default=(64, 64), metavar="HxW")
    g.add_argument("--spec-size", type=_size, default=(96, 64), metavar="HxW")

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--depth", type=int, default=5)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--channels", type=int, default=64)
    t.add_argument("--order", choices=["temporal-first", "spatial-first"], default="temporal-first")
    for flag in ("no-temporal", "no-bidirectional", "no-adapter", "unfreeze-encoders", "two-phase"):
        t.add_argument(f"--{flag}", action="store_true")
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--threshold", type=float, default=None)

    c = sub.add_parser("gradcheck", help="compare reverse-mode gradients with central differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--samples", type=int, default=32)

    d = sub.add_parser("dump-attn", help="export the attention maps of one clip")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--clip", required=True, help="clip id (clip_00012) or manifest index")
    d.add_argument("--out", required=True)
    d.add_argument("--pgm", action="store_true", help="also write 8-bit grayscale images")
    return ap


def cmd_gen_data(args) -> dict:
    cfg = StBavaConfig(frames=args.frames, image_size=args.image_size, spec_size=args.spec_size)
    man = build_dataset(args.out, args.clips, args.mode, args.seed, cfg)
    counts = {s: sum(c["split"] == s for c in man["clips"]) for s in ("train", "val", "test")}
    return {"out": args.out, "clips": len(man["clips"]), "mode": args.mode, "splits": counts}


def cmd_train(args) -> dict:
    from .train import train

    man = read_manifest(args.data)
    cfg = StBavaConfig(
        frames=man["frames"],
        image_size=tuple(man["image_size"]),
        spec_size=tuple(man["spec_size"]),
        epochs=args.epochs,
        lr=args.lr,
        depth=args.depth,
        heads=args.heads,
        channels=args.channels,
        order=args.order,
        no_temporal=args.no_temporal,
        no_bidirectional=args.no_bidirectional,
        no_adapter=args.no_adapter,
        unfreeze_encoders=args.unfreeze_encoders,
        two_phase=args.two_phase,
        batch=args.batch,
        seed=args.seed,
    )
    res = train(cfg, args.data, args.out)
    last = res["history"][-1] if res["history"] else {}
    return {"checkpoint": res["checkpoint"], "log": res["log"], "best_epoch": res["best_epoch"], "last": last}


def _load(path):
    from .train import load_checkpoint

    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> dict:
    from .train import evaluate_model

    model, _, meta = _load(args.ckpt)
    clips = load_split(args.data, args.split)
    if not clips:
        raise ValueError(f"split {args.split!r} of {args.data} is empty")
    rep = evaluate_model(model, clips, args.threshold)
    out = rep.to_dict()
    out["split"] = args.split
    out["epoch"] = meta.get("epoch")
    return out


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_gradcheck

    return run_gradcheck(seed=args.seed, tol=args.tol, samples=args.samples)


def write_pgm(path, arr2d: np.ndarray) -> None:
    """Binary P5 image, min-max scaled to 0..255."""
    a = np.asarray(arr2d, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros(a.shape) if hi <= lo else (a - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _as_image(name: str, m: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Lay a map out in 2-D: spatial maps become frames side by side on the patch grid."""
    gh, gw = grid
    if "space" in name:
        t = m.shape[0]
        return m.reshape(t, gh, gw).transpose(1, 0, 2).reshape(gh, t * gw)
    return m.reshape(m.shape[0], -1)


def cmd_dump_attn(args) -> dict:
    from .model import forward_clip

    model, _, _ = _load(args.ckpt)
    man = read_manifest(args.data)
    entries = man["clips"]
    entry = next((e for e in entries if e["id"] == args.clip), None)
    if entry is None and args.clip.isdigit() and int(args.clip) < len(entries):
        entry = entries[int(args.clip)]
    if entry is None:
        raise KeyError(f"clip {args.clip!r} not in {args.data}")
    clip = load_clip(args.data, entry)
    _, _, record = forward_clip(clip, model)
    os.makedirs(args.out, exist_ok=True)
    written = {}
    for name, m in sorted(record.maps().items()):
        arr = np.asarray(m, dtype=np.float32)
        path = os.path.join(args.out, f"{name}.stbt")
        write_tensor(path, arr)
        written[name] = {"path": path, "dims": list(arr.shape)}
        if args.pgm:
            pgm = os.path.join(args.out, f"{name}.pgm")
            write_pgm(pgm, _as_image(name, arr, model.cfg.grid))
            written[name]["pgm"] = pgm
    return {"clip": entry["id"], "maps": written}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-attn": cmd_dump_attn,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report = COMMANDS[args.command](args)
    except Exception as exc:  # every runtime failure maps to exit 1
        print(f"stbava {args.command}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, sort_keys=True))
    if args.command == "gradcheck" and not report["pass"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
