"""Command-line entry point.

    uqdepth gen-toy --count 10 --size 64 --seed 7 --out data/
    uqdepth train --data data/ --out run/ --epochs 10
    uqdepth eval --ckpt run/checkpoint.uqck --data data/ --out eval/ --median-scale
    uqdepth predict | sparsify | reconstruct --ckpt ... --data ... --out ...

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as uio
from .datasets import DatasetLayout, generate_toy_colon, load_dataset, read_meta, write_dataset
from .fusion import MODES, ModelConfig
from .geometry import CameraIntrinsics, backproject, write_ply
from .metrics import aggregate, compute_metrics, median_scale, reports_to_csv, summary_to_csv
from .trainer import (
    TRAIN_MODES,
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    predict,
    train,
)
from .uncertainty_eval import (
    average_curves,
    curves_to_csv,
    oracle_curve,
    plot_curves,
    sparsification_curve,
    sparsification_error,
)

log = logging.getLogger("uqdepth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # long-form flags only; no prefix guessing
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uqdepth", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")
            sp.add_argument("--batch-size", type=int, default=10)

    g = sub.add_parser("gen-toy", help="write a synthetic colon dataset")
    common(g, data=False)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--d-max", type=float, default=1.0)

    t = sub.add_parser("train", help="pre-train both branches, then fine-tune jointly")
    t.add_argument("--out", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat key = value training config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--lr-decay-gamma", type=float)
    t.add_argument("--fusion-mode", choices=TRAIN_MODES)
    t.add_argument("--augment-p", type=float)
    t.add_argument("--size", type=int, help="network input size (default: dataset size or 256)")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(e, ckpt=True)
    e.add_argument("--median-scale", action=argparse.BooleanOptionalAction, default=True)

    pr = sub.add_parser("predict", help="write fused depth, sigma grids and previews")
    common(pr, ckpt=True)

    s = sub.add_parser("sparsify", help="sparsification and oracle curves per branch")
    common(s, ckpt=True)
    s.add_argument("--step", type=float, default=0.02)
    s.add_argument("--plot", action="store_true")
    s.add_argument("--median-scale", action=argparse.BooleanOptionalAction, default=True)

    r = sub.add_parser("reconstruct", help="back-project predicted depth to PLY")
    common(r, ckpt=True)
    for k in ("fx", "fy", "cx", "cy"):
        r.add_argument(f"--{k}", type=float)
    return p


def _threads():
    n = os.environ.get("UQDEPTH_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _load_model(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "model":
        raise RuntimeError(f"{path} holds a pre-trained {ckpt.kind} branch, not a full model")
    return model_from_checkpoint(ckpt)


def _samples(data, size, require_depth):
    return list(load_dataset(data, DatasetLayout(size=size, require_depth=require_depth)))


def cmd_gen_toy(args):
    samples = generate_toy_colon(args.count, args.size, args.seed)
    write_dataset(samples, args.out, d_max=args.d_max, extra_meta={"size": args.size, "seed": args.seed})
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train(args):
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "pretrain_epochs": args.pretrain_epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "lr_decay_gamma": args.lr_decay_gamma,
        "fusion_mode": args.fusion_mode,
        "augment_p": args.augment_p,
    }
    text = Path(args.config).read_text() if args.config else ""
    config = TrainConfig.from_text(text, **overrides)
    meta = read_meta(args.data)
    size = args.size or meta.get("size") or 256
    model_config = ModelConfig(input_size=int(size), d_max=float(meta.get("d_max", 1.0)), mode=config.model_mode)
    samples = _samples(args.data, model_config.input_size, require_depth=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    result = train(samples, config, model_config, out_dir=args.out)
    summary = {
        "train_samples": len(result.train_ids),
        "val_samples": len(result.val_ids),
        "epoch_loss": result.checkpoint.history["epoch_loss"],
        "val_report": result.val_report.as_dict() if result.val_report else None,
    }
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2))


def cmd_eval(args):
    model = _load_model(args.ckpt)
    samples = _samples(args.data, model.config.input_size, require_depth=True)
    reports, ids = [], []
    for chunk, out in predict(model, samples, args.batch_size):
        for i, s in enumerate(chunk):
            reports.append(compute_metrics(out.depth_fused[i].numpy(), s.depth, args.median_scale))
            ids.append(s.source_id)
    out_dir = Path(args.out)
    (out_dir / "metrics_per_image.csv").write_text(reports_to_csv(reports, ids))
    summary = aggregate(reports)
    (out_dir / "metrics.csv").write_text(summary_to_csv(summary))
    (out_dir / "metrics.json").write_text(json.dumps({k: {"mean": m, "std": s} for k, (m, s) in summary.items()}, indent=2))
    for k, (m, s) in summary.items():
        print(f"{k:>9s} {m:.4f} ± {s:.4f}")


def cmd_predict(args):
    model = _load_model(args.ckpt)
    d_max = model.config.d_max
    samples = _samples(args.data, model.config.input_size, require_depth=False)
    out_dir = Path(args.out)
    for sub in ("depth", "sigma", "vis"):
        (out_dir / sub).mkdir(exist_ok=True)
    for chunk, out in predict(model, samples, args.batch_size):
        for i, s in enumerate(chunk):
            uio.write_fused_depth(out_dir / "depth" / f"{s.source_id}.png", out.depth_fused[i].numpy(), d_max)
            sl = out.sigma_local[i].numpy() if out.sigma_local is not None else None
            sg = out.sigma_global[i].numpy() if out.sigma_global is not None else None
            if sl is not None:
                uio.write_sigma_grid(out_dir / "sigma" / f"{s.source_id}_local.uqdp", sl)
            if sg is not None:
                uio.write_sigma_grid(out_dir / "sigma" / f"{s.source_id}_global.uqdp", sg)
            uio.write_visualization(out_dir / "vis" / f"{s.source_id}.png", s.image,
                                    out.depth_fused[i].numpy(), sl, sg, gt=s.depth)
    (out_dir / "meta.json").write_text(json.dumps({"d_max": d_max, "depth_scale": d_max / 65535}))


def cmd_sparsify(args):
    model = _load_model(args.ckpt)
    samples = _samples(args.data, model.config.input_size, require_depth=True)
    fractions = np.round(np.arange(0.0, 1.0, args.step), 10)
    curves = {"local": [], "global": []}
    oracles = {"local": [], "global": []}
    for chunk, out in predict(model, samples, args.batch_size):
        for branch in curves:
            depth = getattr(out, f"depth_{branch}")
            sigma = getattr(out, f"sigma_{branch}")
            if depth is None:
                continue
            for i, s in enumerate(chunk):
                pred = depth[i].numpy()
                if args.median_scale:
                    pred, _ = median_scale(pred, s.depth)
                err = np.abs(pred - s.depth)
                curves[branch].append(sparsification_curve(err, sigma[i].numpy(), fractions))
                oracles[branch].append(oracle_curve(err, fractions))
    out_dir = Path(args.out)
    areas = {}
    for branch in curves:
        if not curves[branch]:
            continue
        c, o = average_curves(curves[branch]), average_curves(oracles[branch])
        (out_dir / f"sparsification_{branch}.csv").write_text(curves_to_csv(c, o))
        areas[branch] = sparsification_error(c, o)[1]
        if args.plot:
            plot_curves(c, o, out_dir / f"sparsification_{branch}.png", title=f"{branch} branch")
    (out_dir / "ause.json").write_text(json.dumps(areas, indent=2))
    for b, a in areas.items():
        print(f"{b}: sparsification error area {a:.5f}")


def cmd_reconstruct(args):
    model = _load_model(args.ckpt)
    samples = _samples(args.data, model.config.input_size, require_depth=False)
    meta = read_meta(args.data).get("intrinsics", {})
    out_dir = Path(args.out)
    for chunk, out in predict(model, samples, args.batch_size):
        for i, s in enumerate(chunk):
            k = CameraIntrinsics.default_for(s.height, s.width)
            params = {f: getattr(k, f) for f in ("fx", "fy", "cx", "cy")}
            params.update({f: float(v) for f, v in meta.items() if f in params})
            params.update({f: getattr(args, f) for f in params if getattr(args, f) is not None})
            cloud = backproject(out.depth_fused[i].numpy(), s.image, CameraIntrinsics(**params))
            write_ply(cloud, out_dir / f"{s.source_id}.ply")


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sparsify": cmd_sparsify,
    "reconstruct": cmd_reconstruct,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verb is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    _threads()
    torch.manual_seed(args.seed or 0)
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.verb](args)
    except Exception as exc:  # report, don't traceback
        print(f"uqdepth {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
