"""Command-line entry point.

Subcommands: gen, train, infer, eval, baseline, animate, gradcheck,
selftest. Every flag has a default and can also be supplied by a flat
key=value config file (explicit flags win). Randomized commands record
their seed into the output manifest.

Exit codes: 0 success, 1 internal failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


def _load_config_file(path):
    from .data import _read_kv
    return _read_kv(path)


def _all_defaults(parser):
    out = {}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                for a in sp._actions:
                    if a.dest not in ("help",):
                        out[a.dest] = a.default
        elif action.dest not in ("help",):
            out[action.dest] = action.default
    return out


def _apply_config(args, parser, config):
    """Config file values fill in flags the user did not pass explicitly."""
    defaults = _all_defaults(parser)
    for key, raw in config.items():
        dest = key.replace("-", "_")
        if dest not in defaults:
            raise UsageError(f"config file: unknown key {key!r}")
        if getattr(args, dest, None) != defaults[dest]:
            continue  # flag given explicitly, flags win
        default = defaults[dest]
        if isinstance(default, bool):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, dest, value)


def _require(args, *dests):
    for dest in dests:
        if getattr(args, dest, None) is None:
            raise UsageError(f"--{dest.replace('_', '-')} is required "
                             f"(flag or config file)")


def _write_manifest(path, mapping):
    from .data import _write_kv
    _write_kv(path, mapping)


def build_parser():
    parser = argparse.ArgumentParser(prog="partflow",
                                     description="articulated part induction pipeline")
    parser.add_argument("--config", help="flat key=value config file (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a procedural dataset")
    p.add_argument("--out")
    p.add_argument("--templates", default="hinge,drawer",
                   help="comma list from: hinge,drawer,scissors,chain")
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-points", type=int, default=128)
    p.add_argument("--partial", action="store_true")
    p.add_argument("--max-pose-deg", type=float, default=30.0)
    p.add_argument("--full-so3", action="store_true")

    p = sub.add_parser("train", help="stage-wise training on a dataset")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-scale", type=float, default=0.25)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", default="30,30,30")
    p.add_argument("--stage3-decay", type=float, default=1e-3)
    p.add_argument("--motion-pair-cap", type=int, default=0)

    p = sub.add_parser("infer", help="flow + segmentation for one pair")
    p.add_argument("--dataset")
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--refine-iters", type=int, default=5)
    p.add_argument("--init-search", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="metrics over a dataset")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--refine-iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("baseline", help="sequential-RANSAC segmentation baseline")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--checkpoint", help="use predicted flow instead of ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inlier-tau", type=float, default=0.05)

    p = sub.add_parser("animate", help="interpolated motion frames as PLY")
    p.add_argument("--dataset")
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--refine-iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selftest", help="run the acceptance criteria")
    p.add_argument("--skip-slow", action="store_true",
                   help="skip the training-based criteria")
    p.add_argument("--out", default=None, help="directory for artifacts of slow criteria")
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- subcommand bodies ------------------------------------------------------------


def cmd_gen(args):
    from . import data
    _require(args, "out")
    options = data.GenOptions(
        n_points=args.n_points, partial=args.partial,
        max_pose_angle=float(np.radians(args.max_pose_deg)), full_so3=args.full_so3)
    names = [t.strip() for t in args.templates.split(",") if t.strip()]
    samples = data.generate_dataset(names, args.pairs, args.seed, options)
    data.write_dataset(samples, args.out)
    _write_manifest(Path(args.out) / "gen_manifest.txt", {
        "command": "gen", "templates": ",".join(names), "pairs": args.pairs,
        "seed": args.seed, "n_points": args.n_points, "partial": int(args.partial),
        "max_pose_deg": args.max_pose_deg, "full_so3": int(args.full_so3),
    })
    print(f"wrote {len(samples)} pairs to {args.out}")
    return 0


def cmd_train(args):
    from . import data, pipeline, report, train
    _require(args, "dataset", "out")
    samples = data.read_dataset(args.dataset)
    if not samples:
        raise ValueError("empty dataset")
    n_points = len(samples[0].p)
    epochs = tuple(int(v) for v in args.epochs.split(","))
    model = pipeline.Model.init(pipeline.ModelConfig(
        n_points=n_points, width_scale=args.width_scale, seed=args.seed))
    cfg = train.TrainConfig(learning_rate=args.lr, epochs=epochs,
                            stage3_decay=args.stage3_decay, seed=args.seed,
                            motion_pair_cap=args.motion_pair_cap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.txt"
    with open(log_path, "w") as log_fh:
        written = train.train_stagewise(model, samples, cfg, out_dir=out, log_fh=log_fh)
    report.save_training_curves(log_path, out / "loss_curves.png")
    _write_manifest(out / "train_manifest.txt", {
        "command": "train", "dataset": args.dataset, "seed": args.seed,
        "width_scale": args.width_scale, "lr": args.lr,
        "epochs": args.epochs, "stage3_decay": args.stage3_decay,
        "n_points": n_points, "checkpoint": str(written["final"]),
    })
    print(f"final checkpoint: {written['final']}")
    return 0


def _load_pair(args):
    from . import data
    samples = data.read_dataset(args.dataset)
    if not 0 <= args.pair < len(samples):
        raise UsageError(f"pair index {args.pair} outside dataset of {len(samples)}")
    return samples[args.pair]


def cmd_infer(args):
    from . import flow as flow_mod
    from . import pipeline, refine, report
    from .geom import write_ply
    _require(args, "dataset", "checkpoint", "out")
    sample = _load_pair(args)
    model = pipeline.Model.load(args.checkpoint)
    if len(sample.p) != model.config.n_points:
        raise UsageError(f"checkpoint expects N={model.config.n_points}, "
                         f"dataset has N={len(sample.p)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p_cloud = sample.p
    extra = {}
    if args.init_search:
        p_cloud, best, _ = refine.init_search(model, p_cloud, sample.q)
        extra["init_rotation_index"] = best
    cfg = refine.RefineConfig(max_iterations=args.refine_iters)
    flow_np, result, trace = refine.iterate(model, p_cloud, sample.q, cfg)
    flow_mod.write_flow(out / "flow.txt", p_cloud.positions, flow_np)
    np.savetxt(out / "labels_p.txt", result.labels, fmt="%d")
    np.savetxt(out / "labels_q.txt", result.labels_q, fmt="%d")
    write_ply(out / "seg_p.ply", p_cloud.positions, result.labels)
    write_ply(out / "seg_q.ply", sample.q.positions, result.labels_q)
    with open(out / "motions.txt", "w") as fh:
        for lab, motion in enumerate(result.motions):
            n_pts = int((result.labels == lab).sum())
            fh.write(f"part {lab} points {n_pts} degenerate "
                     f"{int(result.motion_degenerate[lab])}\n")
            for row in motion.rotation:
                fh.write("  " + " ".join(f"{v:.9g}" for v in row) + "\n")
            fh.write("  t " + " ".join(f"{v:.9g}" for v in motion.translation) + "\n")
    refine.write_trace(out / "trace.txt", trace)
    report.save_trace_figure(trace, out / "trace.png")
    report.save_segmentation_figure(p_cloud.positions, result.labels,
                                    out / "seg_p.png", title="P segments")
    _write_manifest(out / "infer_manifest.txt", {
        "command": "infer", "dataset": args.dataset, "pair": args.pair,
        "checkpoint": args.checkpoint, "refine_iters": args.refine_iters,
        "init_search": int(args.init_search), "seed": args.seed,
        "segments": result.n_segments, **extra,
    })
    print(f"{result.n_segments} segments; outputs in {out}")
    return 0


def cmd_eval(args):
    from . import data, evaluate, pipeline, refine, report
    _require(args, "dataset", "checkpoint", "out")
    samples = data.read_dataset(args.dataset)
    model = pipeline.Model.load(args.checkpoint)
    rep = evaluate.MetricsReport()
    all_err = []
    cfg = refine.RefineConfig(max_iterations=args.refine_iters)
    for sample in samples:
        flow_np, result, _ = refine.iterate(model, sample.p, sample.q, cfg)
        rep.add_pair(epe_value=evaluate.epe(flow_np, sample.flow),
                     ri=evaluate.rand_index(result.labels, sample.p.labels),
                     iou=evaluate.per_part_iou(result.labels, sample.p.labels))
        all_err.append(np.linalg.norm(flow_np - sample.flow, axis=1))
    err = np.concatenate(all_err)
    thresholds = np.linspace(0.0, evaluate.DEFAULT_PCC_MAX, evaluate.DEFAULT_PCC_STEPS)
    rep.pcc_thresholds = thresholds
    rep.pcc_fractions = (err[None, :] <= thresholds[:, None]).mean(axis=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "metrics.txt")
    rep.write_pcc(out / "pcc.txt")
    report.save_pcc_figure(rep.pcc_thresholds, rep.pcc_fractions, out / "pcc.png")
    _write_manifest(out / "eval_manifest.txt", {
        "command": "eval", "dataset": args.dataset, "checkpoint": args.checkpoint,
        "refine_iters": args.refine_iters, "seed": args.seed,
        "mean_epe": f"{rep.mean_epe:.6f}", "mean_ri": f"{rep.mean_ri:.4f}",
        "mean_iou": f"{rep.mean_iou:.4f}",
    })
    print(rep.to_text().splitlines()[-1].lstrip("# "))
    return 0


def cmd_baseline(args):
    from . import data, evaluate
    from . import tensor as T
    _require(args, "dataset", "out")
    samples = data.read_dataset(args.dataset)
    model = None
    if args.checkpoint:
        from . import pipeline
        model = pipeline.Model.load(args.checkpoint)
    rep = evaluate.MetricsReport()
    cfg = evaluate.RansacConfig(seed=args.seed, inlier_tau=args.inlier_tau)
    for sample in samples:
        if model is None:
            flow_np = sample.flow
        else:
            with T.no_grad():
                flow_np = model.flow_pass(sample.p, sample.q)["flow"].numpy()
        res = evaluate.seq_ransac(sample.p.positions, flow_np, cfg)
        rep.add_pair(ri=evaluate.rand_index(res.labels, sample.p.labels),
                     iou=evaluate.per_part_iou(res.labels, sample.p.labels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "metrics_baseline.txt", name="seq-ransac")
    _write_manifest(out / "baseline_manifest.txt", {
        "command": "baseline", "dataset": args.dataset,
        "checkpoint": args.checkpoint or "", "seed": args.seed,
        "inlier_tau": args.inlier_tau,
        "mean_ri": f"{rep.mean_ri:.4f}", "mean_iou": f"{rep.mean_iou:.4f}",
    })
    print(rep.to_text("seq-ransac").splitlines()[-1].lstrip("# "))
    return 0


def cmd_animate(args):
    from . import pipeline, refine
    from .geom import se3_interp, write_ply
    _require(args, "dataset", "checkpoint", "out")
    sample = _load_pair(args)
    model = pipeline.Model.load(args.checkpoint)
    if args.frames < 2:
        raise UsageError("need at least 2 frames")
    cfg = refine.RefineConfig(max_iterations=args.refine_iters)
    _, result, _ = refine.iterate(model, sample.p, sample.q, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    homs = [m.to_hom() for m in result.motions]
    eye = np.eye(4)
    for k in range(args.frames):
        t = k / (args.frames - 1)
        frame = np.empty_like(sample.p.positions)
        for lab, hom in enumerate(homs):
            sel = result.labels == lab
            inter = se3_interp(eye, hom, t)
            frame[sel] = sample.p.positions[sel] @ inter[:3, :3].T + inter[:3, 3]
        write_ply(out / f"frame_{k:03d}.ply", frame, result.labels)
    _write_manifest(out / "animate_manifest.txt", {
        "command": "animate", "dataset": args.dataset, "pair": args.pair,
        "checkpoint": args.checkpoint, "frames": args.frames, "seed": args.seed,
        "segments": result.n_segments,
    })
    print(f"wrote {args.frames} frames to {out}")
    return 0


def cmd_gradcheck(args):
    from . import selfcheck
    results = selfcheck.gradient_suite(seed=args.seed)
    ok = selfcheck.print_results(results)
    return 0 if ok else 1


def cmd_selftest(args):
    from . import selfcheck
    results = selfcheck.run_acceptance(skip_slow=args.skip_slow, seed=args.seed,
                                       out_dir=args.out)
    ok = selfcheck.print_results(results)
    return 0 if ok else 1


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "baseline": cmd_baseline, "animate": cmd_animate,
    "gradcheck": cmd_gradcheck, "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    warnings.filterwarnings("once")
    try:
        if args.config:
            _apply_config(args, parser, _load_config_file(args.config))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        sub = next(a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction))
        print(sub.choices[args.command].format_usage(), file=sys.stderr, end="")
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
