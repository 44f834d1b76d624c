"""Command-line entry point: ``slamformer run | train | eval``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config, model_config, pipeline_config, train_config
from .data import SyntheticSpec, generate_synthetic_sequence, load_tum_sequence
from .errors import ConfigError, DataIOError, SlamFormerError
from .evaluation import ate_rmse, format_flat, recon_metrics, report_dict, write_report
from .formats import read_ply, read_trajectory
from .model import SlamFormer, load_checkpoint, save_checkpoint
from .training import Optimizer, training_iteration

log = logging.getLogger("slamformer")


def _source(spec: str, image_hw, window: float, seed: int):
    if spec.startswith("synthetic:"):
        syn = SyntheticSpec.parse(spec[len("synthetic:"):])
        if syn.image_hw != tuple(image_hw):
            syn = SyntheticSpec(syn.num_frames, syn.motion, syn.step, syn.scene, image_hw, syn.fps, syn.start)
        return generate_synthetic_sequence(syn, seed)
    if not Path(spec).is_dir():
        raise DataIOError(f"input {spec!r} is neither a directory nor 'synthetic:<spec>'")
    return load_tum_sequence(spec, image_hw, window)


def _values(args) -> dict:
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for key in ("ablation", "tau", "period", "seed", "lr", "iters", "window"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "out", None):
        values["output_dir"] = args.out
    return values


def _model(values: dict):
    if "weights" in values:
        m = load_checkpoint(values["weights"], values.get("freeze_pose_head", False))
        if m.cfg.image_hw != model_config(values).image_hw and "image_size" in values:
            raise ConfigError("checkpoint image size differs from configured image_size")
        return m
    return SlamFormer(model_config(values), seed=values.get("seed", 0))


def cmd_run(args) -> int:
    from .pipeline import run_sequence

    values = _values(args)
    cfg = pipeline_config(values)
    model = _model(values)
    src = _source(args.input, model.cfg.image_hw, values.get("window", 0.02), cfg.seed)
    art = run_sequence(src, cfg, model)
    print(f"keyframes = {len(art.keyframes)}")
    print(f"backend_mid = {art.backend_calls['mid']}")
    print(f"backend_end = {art.backend_calls['end']}")
    print(f"fps = {art.timing.fps:.9g}")
    if cfg.output_dir:
        print(f"output_dir = {cfg.output_dir}")
    return 0


def cmd_train(args) -> int:
    values = _values(args)
    cfg = train_config(values)
    model = _model(values)
    src = _source(args.clips, model.cfg.image_hw, values.get("window", 0.02), values.get("seed", 0))
    clip_len = values.get("clip_len", 4)
    if len(src) < clip_len:
        raise ConfigError(f"sequence has {len(src)} frames; clip_len is {clip_len}")
    iters = values.get("iters", 200)
    starts = range(0, len(src) - clip_len + 1, clip_len)
    opt = Optimizer(model, cfg)
    out = Path(values["output_dir"]) if "output_dir" in values else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"cannot create {out}: {e}") from e
    lines = []
    for it in range(iters):
        frames, targets = src.clip(starts[it % len(starts)], clip_len)
        rep = training_iteration(frames, targets, model, cfg, opt)
        lines.append(f"{it} {rep.L_all:.9g} {rep.L_mode1:.9g} {rep.L_mode2:.9g} {rep.L_mode3:.9g}")
        log.info("iter %d L_all %.6g", it, rep.L_all)
    print(f"L_all_first = {float(lines[0].split()[1]):.9g}" if lines else "L_all_first = nan")
    print(f"L_all_last = {float(lines[-1].split()[1]):.9g}" if lines else "L_all_last = nan")
    if out is not None:
        save_checkpoint(model, out / "weights.sfwt")
        try:
            (out / "loss_log.txt").write_text("# iter L_all L_mode1 L_mode2 L_mode3\n" + "\n".join(lines) + "\n")
        except OSError as e:
            raise DataIOError(f"cannot write loss log: {e}") from e
    return 0


def cmd_eval(args) -> int:
    if (args.pointcloud is None) != (args.gt_cloud is None):
        raise ConfigError("--pointcloud and --gt-cloud must be given together")
    traj = ate_rmse(read_trajectory(args.pred), read_trajectory(args.gt), args.align, args.window)
    recon = None
    if args.pointcloud:
        recon = recon_metrics(read_ply(args.pointcloud)[0], read_ply(args.gt_cloud)[0],
                              args.samples, args.seed)
    doc = report_dict(traj, recon)
    sys.stdout.write(format_flat(doc))
    if args.report or args.json:
        write_report(doc, args.report, args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slamformer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the online pipeline on a sequence")
    r.add_argument("--input", required=True, help="TUM directory or synthetic:<key=value,...>")
    r.add_argument("--config")
    r.add_argument("--ablation", choices=["f", "f+eb", "f+mb", "f+mb+eb"])
    r.add_argument("--tau", type=float)
    r.add_argument("--period", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--window", type=float)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("train", help="overfit/train on clips from a sequence")
    t.add_argument("--clips", required=True, help="TUM directory with depth or synthetic:<spec>")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trajectory (and optionally a point cloud)")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--pointcloud")
    e.add_argument("--gt-cloud")
    e.add_argument("--align", choices=["sim3", "se3"], default="sim3")
    e.add_argument("--window", type=float, default=0.02)
    e.add_argument("--samples", type=int, default=20000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", help="write the flat key = value report here")
    e.add_argument("--json", help="write a JSON report here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SlamFormerError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
