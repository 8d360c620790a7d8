"""Command-line entry point.

Subcommands: synth-gen, train, eval, ablate, export-attn, grad-check.
Exit codes: 0 success, 1 validation error, 2 runtime failure. All file
outputs land under the command's --out directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want 1
        raise CliError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="crossview",
                description="Cross-view product retrieval: data, training, "
                            "evaluation, and verification.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-gen", parents=[], help="generate a synthetic dataset")
    g.add_argument("--pairs", type=int, default=600, help="training pairs")
    g.add_argument("--test-pairs", type=int, default=0, help="held-out pairs")
    g.add_argument("--gallery-extra", type=int, default=0,
                   help="gallery-only confuser images")
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    g.add_argument("--out", required=True, help="output dataset directory")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--row", choices=["a", "b", "c", "d", "f"],
                   help="ablation row shorthand for the loss toggles")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--box-input", action="store_true", default=None,
                   help="crop clip frames to product boxes")
    t.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--shortlist-k", type=int, default=16)
    e.add_argument("--no-matching", action="store_true",
                   help="global-similarity ranking only")
    e.add_argument("--text", action="store_true", help="fuse text similarity")
    e.add_argument("--box-input", action="store_true")
    e.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train and evaluate ablation rows")
    a.add_argument("--data", required=True)
    a.add_argument("--rows", default="a,c,d,f")
    a.add_argument("--seeds", default="0")
    a.add_argument("--steps", type=int)
    a.add_argument("--batch-size", type=int)
    a.add_argument("--shortlist-k", type=int, default=16)
    a.add_argument("--box-input", action="store_true")
    a.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    a.add_argument("--out", required=True)

    x = sub.add_parser("export-attn", help="export decoder attention maps")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--pair", required=True,
                   help="pair id or integer index into the manifest")
    x.add_argument("--reduce", choices=["mean", "max", "per-head"], default="mean")
    x.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    x.add_argument("--out", required=True)

    c = sub.add_parser("grad-check", help="verify gradients against finite differences")
    c.add_argument("--config", help="JSON file overriding micro-model fields")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--kernel-tol", type=float, default=1e-6)
    c.add_argument("--objective-tol", type=float, default=1e-4)
    return p


# ---- command implementations ----


def cmd_synth_gen(args) -> int:
    from .synth import SynthConfig, synth_generate
    cfg = SynthConfig(train_pairs=args.pairs, test_pairs=args.test_pairs,
                      gallery_extra=args.gallery_extra,
                      image_size=args.image_size, frames=args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = synth_generate(cfg, args.seed, out, threads=args.threads)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _train_config(args):
    from .trainer import ABLATION_ROWS, TrainConfig
    if args.config:
        cfg = TrainConfig.from_file(Path(args.config))
    else:
        cfg = TrainConfig()
    updates = {}
    if args.row:
        updates["losses"] = list(ABLATION_ROWS[args.row]["losses"])
        updates["text_fusion"] = ABLATION_ROWS[args.row]["text"]
    if args.steps is not None:
        updates["steps"] = args.steps
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "box_input", None):
        updates["box_input"] = True
    if updates:
        cfg = type(cfg).from_dict({**cfg.to_dict(), **updates})
    return cfg


def cmd_train(args) -> int:
    from .data import PairDataset
    from .trainer import train_run
    cfg = _train_config(args)
    dataset = PairDataset(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    model, history = train_run(dataset, cfg, out)
    print(f"trained {cfg.steps} steps; final total loss "
          f"{history[-1]['total']:.4f}; checkpoint at {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .data import PairDataset
    from .model import CrossViewModel
    from .retrieval import EvalConfig, evaluate
    model, _ = CrossViewModel.load(Path(args.ckpt))
    dataset = PairDataset(Path(args.data))
    cfg = EvalConfig(shortlist_k=args.shortlist_k,
                     use_matching=not args.no_matching,
                     use_text=args.text, box_input=args.box_input)
    report = evaluate(model, dataset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_csv(out / "report.csv")
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    from .data import PairDataset
    from .trainer import TrainConfig, run_ablation_suite
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    base = TrainConfig()
    updates = {}
    if args.steps is not None:
        updates["steps"] = args.steps
    if args.batch_size is not None:
        updates["batch_size"] = args.batch_size
    if args.box_input:
        updates["box_input"] = True
    if updates:
        base = TrainConfig.from_dict({**base.to_dict(), **updates})
    dataset = PairDataset(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation_suite(dataset, rows, seeds, base, out,
                                 shortlist_k=args.shortlist_k)
    for row in rows:
        mean = results[row]["mean_rank_k"]
        print(f"row {row}: R1={mean[1]:.3f} R5={mean[5]:.3f} R10={mean[10]:.3f}")
    return 0


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    arr = np.clip(np.round(image), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def cmd_export_attn(args) -> int:
    from .autodiff import Tensor, no_grad
    from .checkpoint import save_checkpoint
    from .data import PairDataset
    from .decoder import export_attention, split_frames
    from .model import CrossViewModel
    model, _ = CrossViewModel.load(Path(args.ckpt))
    model = model.clone(np.float32)
    dataset = PairDataset(Path(args.data))
    by_id = {r.pair_id: r for r in dataset.records}
    rec = by_id.get(args.pair)
    if rec is None:
        try:
            rec = dataset.records[int(args.pair)]
        except (ValueError, IndexError):
            raise CliError(f"pair {args.pair!r} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    image = dataset.load_pair_image(rec, np.float32)
    frames = dataset.load_pair_frames(rec, model.cfg.encoder.frames, np.float32)
    with no_grad():
        img_feats = model.encoder.encode_image(Tensor(image))
        vid_feats = model.encoder.encode_video(Tensor(frames))
        result = model.decoder.decode_pair(img_feats, vid_feats)

    dumped = export_attention(result, args.reduce).astype(np.float32)
    save_checkpoint(out / "attention.bin", {"attention": dumped},
                    {"pair_id": rec.pair_id, "reduce": args.reduce,
                     "logit": float(result.logit.data)})

    mean_map = export_attention(result, "mean")
    f = model.cfg.encoder.frames
    grid = model.cfg.encoder.grid
    per_frame = split_frames(mean_map, f).mean(axis=0)  # [F, N_frame]
    for fi in range(f):
        heat = per_frame[fi].reshape(grid, grid)
        lo, hi = heat.min(), heat.max()
        scaled = (heat - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(heat)
        up = np.kron(scaled, np.ones((model.cfg.encoder.patch_size,) * 2))
        write_pgm(out / f"attn_frame_{fi:03d}.pgm", up)
    print(f"wrote attention dump and {f} heatmaps to {out}")
    return 0


def cmd_grad_check(args) -> int:
    from .model import ModelConfig
    from .verify import MICRO_MODEL, full_objective_grad_error, kernel_grad_errors
    cfg = MICRO_MODEL
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            overrides = json.load(f)
        base = cfg.to_dict()
        enc = {**base["encoder"], **overrides.get("encoder", {})}
        base.update({k: v for k, v in overrides.items() if k != "encoder"})
        base["encoder"] = enc
        cfg = ModelConfig.from_dict(base)
    kernel_errors = kernel_grad_errors(args.seed, args.eps)
    ok = True
    for name, err in sorted(kernel_errors.items()):
        status = "ok" if err < args.kernel_tol else "FAIL"
        ok &= err < args.kernel_tol
        print(f"kernel {name:<12} max rel err {err:.3e}  [{status}]")
    obj_err = full_objective_grad_error(args.seed, args.eps, cfg=cfg)
    status = "ok" if obj_err < args.objective_tol else "FAIL"
    ok &= obj_err < args.objective_tol
    print(f"full objective  max rel err {obj_err:.3e}  [{status}]")
    return 0 if ok else 2


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-attn": cmd_export_attn,
    "grad-check": cmd_grad_check,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failure boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
