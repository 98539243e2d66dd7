"""Command-line interface.

Subcommands: train, eval, infer, gradcheck, probe, gen-data. All commands
take --config (key = value file) and --seed (overriding the config seed);
outputs land under --out.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .backend import BACKEND_NAME
from .checkpoint import read_checkpoint
from .config import ModelConfig, load_config
from .data import CORRUPTION_KINDS, SceneDataset, make_splits
from .gradcheck import gradcheck_model
from .imageio import read_ppm, write_pgm, write_ppm
from .infer import DEFAULT_SCALES, FINE_SCALES, multi_scale_infer
from .model import build_model
from .probe import probe_model, write_probe_outputs
from .train import evaluate, scene_spec, train


def _parse_scales(text: str):
    named = {"default": DEFAULT_SCALES, "fine": FINE_SCALES}
    if text in named:
        return named[text]
    try:
        scales = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ValueError(f"bad --scales value {text!r}: expected floats or default/fine")
    if not scales:
        raise ValueError("bad --scales value: empty list")
    return scales


def _parse_corrupt(text: str):
    kind, sep, sev = text.partition(":")
    if not sep:
        raise ValueError("bad --corrupt value: expected KIND:SEVERITY")
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTION_KINDS}")
    severity = int(sev)
    if not 0 <= severity <= 5:
        raise ValueError(f"corruption severity must be 0..5, got {severity}")
    return kind, severity


def _load_cfg(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _load_model(cfg, checkpoint_path):
    model = build_model(cfg)
    if checkpoint_path:
        model.load_state_dict(read_checkpoint(checkpoint_path))
    model.eval()
    return model


def _add_common(p):
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="seed override (u64)")
    p.add_argument("--out", default="out", help="output directory")


def _infer_kwargs(args):
    kw = {}
    if getattr(args, "scales", None):
        kw["scales"] = _parse_scales(args.scales)
    if getattr(args, "window", None):
        kw["window"] = args.window
        kw["stride"] = args.stride if args.stride else args.window
    return kw


def cmd_train(args):
    cfg = _load_cfg(args)
    def progress(rec):
        print(f"step {rec['step']:>5}  lr {rec['lr']:.2e}  total {rec['total']:.4f}  "
              f"seg {rec['seg']:.4f}", flush=True)
    result = train(cfg, out_dir=args.out, progress=progress)
    print(json.dumps({"backend": BACKEND_NAME, "checkpoint": result.checkpoint_path,
                      **result.report.as_dict()}))
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    _, eval_ds = make_splits(scene_spec(cfg), cfg.train_scenes, cfg.eval_scenes)
    kw = _infer_kwargs(args)
    if args.corrupt:
        kind, severity = _parse_corrupt(args.corrupt)
        kw.update(corrupt_kind=kind, severity=severity)
    report = evaluate(model, eval_ds, cfg, flip=args.flip, **kw)
    line = json.dumps({"n_scenes": len(eval_ds), **report.as_dict()})
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.jsonl"), "a") as f:
        f.write(line + "\n")
    print(line)
    return 0


def cmd_infer(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    kw = _infer_kwargs(args)
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        img = read_ppm(path)
        pred = multi_scale_infer(model, img[None], flip=args.flip, **kw)[0]
        name = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, f"{name}_pred.pgm")
        write_pgm(out_path, pred)
        print(out_path)
    return 0


def cmd_gradcheck(args):
    cfg = _load_cfg(args)
    result = gradcheck_model(cfg, batch=args.batch, rtol=args.rtol,
                             entries_per_param=args.entries)
    for name, err in sorted(result.per_param.items(), key=lambda kv: -kv[1])[:10]:
        print(f"{err:10.3e}  {name}")
    print(f"checked {len(result.per_param)} parameters, {result.n_checks} probes; "
          f"max rel err {result.max_rel_err:.3e}")
    if result.failures:
        for name, kind, err in result.failures:
            print(f"FAIL {name} {kind}: rel err {err:.3e}", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def cmd_probe(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    if args.image:
        img = read_ppm(args.image)[None]
    else:
        _, eval_ds = make_splits(scene_spec(cfg), cfg.train_scenes, cfg.eval_scenes)
        img = eval_ds[args.index][0][None]
    report = write_probe_outputs(probe_model(model, img), img, args.out)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    spec = scene_spec(cfg)
    offset = 0 if args.split == "train" else cfg.train_scenes
    count = args.count if args.count else (
        cfg.train_scenes if args.split == "train" else cfg.eval_scenes)
    ds = SceneDataset(spec, count, offset)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "manifest.jsonl"), "w") as f:
        for i in range(count):
            img, lab = ds[i]
            img_name, lab_name = f"img_{i:05d}.ppm", f"lab_{i:05d}.pgm"
            write_ppm(os.path.join(args.out, img_name), img)
            write_pgm(os.path.join(args.out, lab_name), lab.astype(np.uint8))
            f.write(json.dumps({"index": offset + i, "image": img_name,
                                "label": lab_name}) + "\n")
    print(f"wrote {count} scenes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sepseg",
                                 description="separation-based segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on the synthetic dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scales", help="comma floats, or default/fine")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--flip", action="store_true", help="average mirrored predictions")
    p.add_argument("--corrupt", help="KIND:SEVERITY corruption to apply")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="predict label maps for PPM images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scales", help="comma floats, or default/fine")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--flip", action="store_true")
    p.add_argument("images", nargs="+", help="input PPM files")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--entries", type=int, default=2,
                   help="individually checked entries per parameter")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("probe", help="feature-smoothness report and heatmaps")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="probe this PPM instead of an eval scene")
    p.add_argument("--index", type=int, default=0, help="eval-scene index")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("gen-data", help="write synthetic scenes to disk")
    _add_common(p)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--count", type=int, help="number of scenes (default: split size)")
    p.set_defaults(fn=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
