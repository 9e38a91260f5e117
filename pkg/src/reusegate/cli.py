"""Command-line entry points: train, eval, ablate, histogram, synth.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import flops as F
from . import metrics as M
from . import pipeline as P
from .netpbm import read_video_dir, write_video_dir
from .network import ModelConfig, ReuseGateNet, load_model, save_model
from .synth import SynthConfig, synth_sequence
from .training import NonFiniteLossError, TrainConfig, train


def _fail(message):
    print(f"error: {message}", file=sys.stderr)
    return 2


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _build_configs(doc):
    train_cfg = TrainConfig(**doc.get("train", {}))
    synth_cfg = SynthConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in doc.get("synth", {}).items()
    })
    model_doc = {
        k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("model", {}).items()
    }
    model_cfg = ModelConfig(**model_doc)
    return train_cfg, synth_cfg, model_cfg


def _read_videos(dirs):
    videos = []
    for d in dirs:
        frames, masks = read_video_dir(d)
        videos.append((os.path.basename(os.path.normpath(d)), frames, masks))
    return videos


def _inference_config(args, tau=None, mode=None, tau2=None):
    tau = args.tau if tau is None else tau
    mode = args.mode if mode is None else mode
    tau2 = getattr(args, "tau2", None) if tau2 is None else tau2
    return P.InferenceConfig(
        gate=P.GateConfig(tau=tau, tau2=tau2, mode=mode),
        ft_steps=args.ft_steps,
        ft_lr=args.ft_lr,
        refresh=args.refresh == "on",
    )


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------


def cmd_train(args):
    try:
        doc = _load_json(args.config)
        train_cfg, synth_cfg, model_cfg = _build_configs(doc)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        return _fail(f"bad config: {exc}")
    if args.seed is not None:
        train_cfg.seed = args.seed

    model = ReuseGateNet(model_cfg, seed=train_cfg.seed)
    log_path = os.path.splitext(args.out)[0] + ".log.jsonl"
    try:
        with open(log_path, "w") as log:
            train(model, train_cfg, synth_cfg, log_stream=log,
                  progress_every=args.progress_every)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    save_model(args.out, model)
    print(f"checkpoint written to {args.out}; log at {log_path}")
    return 0


def cmd_eval(args):
    try:
        model = load_model(args.checkpoint)
        videos = _read_videos(args.videos)
        icfg = _inference_config(args)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))

    report, records = P.evaluate_videos(model, videos, icfg)
    stem = os.path.splitext(args.out)[0]
    _write_json(args.out, report)
    with open(stem + "_decisions.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    rate_rows = [
        (v["name"], f"{v['J']:.6f}", f"{v['F']:.6f}", f"{v['JF']:.6f}",
         f"{v['reuse_rate']:.6f}", f"{v['flop_ratio']:.6f}")
        for v in report["videos"]
    ]
    agg = report["aggregate"]
    rate_rows.append(
        ("aggregate", f"{agg['J']:.6f}", f"{agg['F']:.6f}", f"{agg['JF']:.6f}",
         f"{agg['reuse_rate']:.6f}", f"{agg['flop_ratio']:.6f}")
    )
    _write_csv(stem + "_rates.csv", ["video", "J", "F", "JF", "reuse_rate", "flop_ratio"], rate_rows)

    # per-layer totals attributed by executed path counts; records are flat
    # in video order, so regroup by each video's record count
    flop_rows = []
    hw = videos[0][2][0].shape
    offset = 0
    for name, frames, masks in videos:
        n_obj = len(P.object_ids_from_mask(masks[0]))
        n_rec = (frames.shape[0] - 1) * n_obj
        recs = records[offset : offset + n_rec]
        offset += n_rec
        counts = {}
        for rec in recs:
            counts[rec.decision] = counts.get(rec.decision, 0) + 1
        for path, n in sorted(counts.items()):
            for row in F.path_layers(path, model.cfg, hw):
                flop_rows.append((name, path, row.name, n, row.flops * n))
    _write_csv(stem + "_flops.csv", ["video", "path", "layer", "frames", "flops"], flop_rows)

    print(json.dumps(agg, sort_keys=True))
    return 0


def cmd_ablate(args):
    try:
        model = load_model(args.checkpoint)
        videos = _read_videos(args.videos)
        taus = [float(t) for t in args.tau.split(",")]
        modes = args.modes.split(",")
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    for mode in modes:
        if mode not in P.MODES:
            return _fail(f"unknown mode {mode!r}")

    rows = []
    for tau in taus:
        for mode in modes:
            tau2 = max(args.tau2, tau) if mode == "fusion" else None
            try:
                icfg = _inference_config(args, tau=tau, mode=mode, tau2=tau2)
            except ValueError as exc:
                return _fail(str(exc))
            report, _ = P.evaluate_videos(model, videos, icfg)
            agg = report["aggregate"]
            rows.append(
                {
                    "tau": tau,
                    "mode": mode,
                    "J": agg["J"],
                    "F": agg["F"],
                    "JF": agg["JF"],
                    "reuse_rate": agg["reuse_rate"],
                    "flop_ratio": agg["flop_ratio"],
                }
            )

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    _write_csv(
        csv_path,
        ["tau", "mode", "J", "F", "JF", "reuse_rate", "flop_ratio"],
        [
            (f"{r['tau']:g}", r["mode"], f"{r['J']:.6f}", f"{r['F']:.6f}",
             f"{r['JF']:.6f}", f"{r['reuse_rate']:.6f}", f"{r['flop_ratio']:.6f}")
            for r in rows
        ],
    )
    from .plots import save_ablation_scatter

    save_ablation_scatter(rows, os.path.join(args.out, "ablation.svg"))
    print(f"wrote {csv_path} and ablation.svg ({len(rows)} rows)")
    return 0


def cmd_histogram(args):
    try:
        videos = _read_videos(args.videos)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))

    ious = []
    for _, frames, masks in videos:
        if frames.shape[0] < 2:
            return _fail("histogram needs at least 2 ground-truth masks per video")
        for oid in P.object_ids_from_mask(masks[0]):
            gt = [m == oid for m in masks]
            ious.extend(M.consecutive_ious(gt))

    if not (0.0 < args.bin_width <= 1.0):
        return _fail("bin width must lie in (0, 1]")
    n_bins = int(np.ceil(1.0 / args.bin_width - 1e-12))
    counts = [0] * n_bins
    for v in ious:
        counts[min(int(v / args.bin_width), n_bins - 1)] += 1
    hist = M.IoUHistogram(bin_width=args.bin_width, counts=counts, total=len(ious))

    stem = os.path.splitext(args.out)[0]
    rows = [
        (f"{lo:.6f}", f"{hi:.6f}", c, f"{frac:.9f}")
        for (lo, hi), c, frac in zip(hist.edges(), hist.counts, hist.fractions())
    ]
    _write_csv(stem + ".csv", ["bin_lo", "bin_hi", "count", "fraction"], rows)
    from .plots import save_histogram_chart

    save_histogram_chart(hist, stem + ".svg")
    above = sum(1 for v in ious if v > 0.7) / len(ious)
    print(f"fraction of consecutive-mask pairs with IoU > 0.7: {above:.4f}")
    return 0


def cmd_synth(args):
    lo, _, hi = args.size.partition(":")
    vlo, _, vhi = args.speed.partition(":")
    try:
        cfg = SynthConfig(
            size_range=(int(lo), int(hi or lo)),
            velocity_range=(int(vlo), int(vhi or vlo)),
            static_prob=args.static_prob,
            distractor_count=args.distractors,
            background_noise=args.noise,
        )
    except ValueError as exc:
        return _fail(str(exc))
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.videos):
        child = np.random.SeedSequence(entropy=args.seed or 0, spawn_key=(i,))
        frames, masks = synth_sequence(cfg, args.frames, child)
        write_video_dir(os.path.join(args.out, f"video{i:03d}"), frames, masks.astype(np.uint8))
    print(f"wrote {args.videos} videos under {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="reusegate",
        description="Reuse-gated dynamic video object segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on synthetic sequences")
    p_train.add_argument("--config", required=True, help="JSON with train/synth/model sections")
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--progress-every", type=int, default=0)
    p_train.set_defaults(fn=cmd_train)

    def add_eval_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("videos", nargs="+", help="video directories")
        p.add_argument("--ft-steps", type=int, default=12)
        p.add_argument("--ft-lr", type=float, default=1e-3)
        p.add_argument("--refresh", choices=("on", "off"), default="on")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on videos")
    add_eval_flags(p_eval)
    p_eval.add_argument("--tau", type=float, default=0.7)
    p_eval.add_argument("--tau2", type=float, default=None)
    p_eval.add_argument("--mode", choices=P.MODES, default="dynamic")
    p_eval.add_argument("--out", required=True, help="report JSON path")
    p_eval.set_defaults(fn=cmd_eval)

    p_abl = sub.add_parser("ablate", help="sweep thresholds and reuse variants")
    add_eval_flags(p_abl)
    p_abl.add_argument("--tau", default="0.1,0.3,0.5,0.7,0.9,1.0",
                       help="comma-separated thresholds")
    p_abl.add_argument("--tau2", type=float, default=0.8, help="copy threshold for fusion")
    p_abl.add_argument("--modes", default="dynamic,copy,fusion")
    p_abl.add_argument("--out", required=True, help="output directory")
    p_abl.set_defaults(fn=cmd_ablate)

    p_hist = sub.add_parser("histogram", help="consecutive-mask IoU histogram")
    p_hist.add_argument("videos", nargs="+")
    p_hist.add_argument("--bin-width", type=float, default=0.1)
    p_hist.add_argument("--out", required=True, help="output stem or .csv path")
    p_hist.set_defaults(fn=cmd_histogram)

    p_synth = sub.add_parser("synth", help="materialize synthetic videos to disk")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--videos", type=int, default=8)
    p_synth.add_argument("--frames", type=int, default=12)
    p_synth.add_argument("--size", default="12:24", help="shape size range lo:hi")
    p_synth.add_argument("--speed", default="0:4", help="speed range lo:hi px/frame")
    p_synth.add_argument("--static-prob", type=float, default=0.3)
    p_synth.add_argument("--distractors", type=int, default=0)
    p_synth.add_argument("--noise", type=float, default=0.05)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
