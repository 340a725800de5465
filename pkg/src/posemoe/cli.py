"""``posemoe`` command line: gen-data, train, eval, diagnose, gradcheck.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure, 4 I/O error.
Tables go to CSV files with a PNG figure beside each one.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as runconfig
from . import plotting
from .data import (GenerationError, PoseDataset, ProjectionError, PseqError, generate_synthetic, load_dataset,
                   write_dataset)
from .gradcheck import MAX_PARAMETERS, model_gradcheck, summarize
from .metrics import (AlignmentError, axis_mpjpe, evaluate, mpjpe, mutual_information_probe, noise_sweep,
                      pixel_error, reproject_to_image)
from .model import ConfigError
from .tensor_core import NonFiniteError, Rng
from .training import CheckpointError, load_checkpoint, predict_mm, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("posemoe")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    return repr(float(x))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# config assembly


def _load_run_config(args) -> runconfig.RunConfig:
    if getattr(args, "config", None):
        cfg = runconfig.load(args.config)
    else:
        cfg = runconfig.preset(getattr(args, "preset", None) or "desk")
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if section not in runconfig.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        d = cfg.to_dict()
        if name not in d[section]:
            raise ConfigError(f"unknown key in [{section}]: {name}")
        cfg = cfg.override(section, **{name: value})
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.override("training", epochs=args.epochs)
    if getattr(args, "max_steps", None) is not None:
        cfg = cfg.override("training", max_steps=args.max_steps)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.override("training", seed=args.seed).override("model", seed=args.seed)
    return cfg


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _split(manifest, split):
    ds = load_dataset(manifest, split)
    if len(ds) == 0:
        raise UsageError(f"split {split!r} of {manifest} is empty")
    return ds


def _check_shapes(model_config, ds) -> None:
    if (ds.frames, ds.joints) != (model_config.frames, model_config.joints):
        raise ConfigError(f"checkpoint expects T={model_config.frames}, J={model_config.joints}; "
                          f"data has T={ds.frames}, J={ds.joints}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if not 0 <= args.val_fraction < 1:
        raise UsageError("--val-fraction must be in [0, 1)")
    manifest = write_dataset(args.out_dir, args.seed, args.sequences, args.frames, args.val_fraction)
    ds = load_dataset(Path(args.out_dir) / "manifest.json")
    splits = [s.split for s in manifest.sequences]
    uv = ds.pose2d_px
    print(f"sequences={len(manifest.sequences)} train={splits.count('train')} val={splits.count('val')}")
    print(f"frames={manifest.frames} joints={manifest.skeleton.joints} seed={manifest.seed}")
    print(f"u_range_px=[{_fmt(uv[..., 0].min())}, {_fmt(uv[..., 0].max())}] "
          f"v_range_px=[{_fmt(uv[..., 1].min())}, {_fmt(uv[..., 1].max())}]")
    print(f"root_depth_mm=[{_fmt(ds.root_mm[..., 2].min())}, {_fmt(ds.root_mm[..., 2].max())}]")
    print(f"manifest={Path(args.out_dir) / 'manifest.json'}")
    return EXIT_OK


def _dataset_for_training(cfg, data):
    if data:
        return load_dataset(data, "train"), load_dataset(data, "val")
    triples = generate_synthetic(cfg.data.seed, cfg.data.sequences, cfg.model.frames)
    n_val = int(round(cfg.data.sequences * cfg.data.val_fraction))
    full = PoseDataset.from_triples(triples)
    cut = cfg.data.sequences - n_val
    return full.subset(range(cut)), full.subset(range(cut, cfg.data.sequences))


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = _load_checkpoint(args.resume)
        if resume.model_config != cfg.model:
            raise ConfigError("--resume checkpoint was trained with a different model config")
    train_set, val_set = _dataset_for_training(cfg, args.data)
    (out / "config.json").write_text(cfg.emit())
    start = time.perf_counter()

    def echo(record):
        line = json.dumps(record, sort_keys=True)
        if args.verbose:
            line += f"  # {time.perf_counter() - start:.1f}s"
        print(line, flush=True)

    train(cfg.model, cfg.training, train_set, val_set, callbacks=[echo], out_dir=out,
          resume=resume, log_path=out / "metrics.jsonl")
    if cfg.eval.figures:
        all_records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        plotting.plot_training_curve(all_records, out / "training_curve.png")
    return EXIT_OK


def _predictions(args, ckpt, ds):
    if args.gt_as_prediction:
        return ds.pose3d_mm.copy()
    _check_shapes(ckpt.model_config, ds)
    model = ckpt.build_model()
    return predict_mm(model, ds, flip_test=ckpt.train_config.flip_test, scale_mm=ckpt.train_config.target_scale_mm)


def cmd_eval(args) -> int:
    if not args.gt_as_prediction and not args.ckpt:
        raise UsageError("eval needs --ckpt unless --gt-as-prediction is given")
    ckpt = _load_checkpoint(args.ckpt) if args.ckpt else None
    ds = _split(args.data, args.split)
    pred = _predictions(args, ckpt, ds)
    report = evaluate(pred, ds.pose3d_mm, ds.skeleton.root)
    if not np.isfinite(report.mpjpe_mm):
        raise NonFiniteError("non-finite MPJPE")
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    _write_csv(out / "per_axis.csv", ["axis", "mpjpe_mm"],
               [[k, _num(v)] for k, v in report.per_axis.items()] + [["all", _num(report.mpjpe_mm)]])
    if not args.no_figures:
        plotting.plot_axis_mpjpe(report.per_axis, report.mpjpe_mm, out / "per_axis.png")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _reproject_rows(ds, pred_rel, input_px):
    if ds.camera is None:
        raise ProjectionError("dataset has no camera model; reprojection needs intrinsics")
    pred_px = reproject_to_image(pred_rel, ds.camera, ds.root_mm)
    gt_px = reproject_to_image(ds.pose3d_mm, ds.camera, ds.root_mm)
    return (pixel_error(input_px, ds.pose2d_px), pixel_error(pred_px, ds.pose2d_px),
            pixel_error(gt_px, ds.pose2d_px))


def cmd_diagnose(args) -> int:
    needs_model = not (args.mode == "reproject" and args.use_gt)
    if needs_model and not args.ckpt:
        raise UsageError(f"--mode {args.mode} needs --ckpt")
    if args.input_noise < 0:
        raise UsageError("--input-noise must be >= 0")
    ds = _split(args.data, args.split)
    ckpt = _load_checkpoint(args.ckpt) if args.ckpt else None
    model = None
    if ckpt is not None:
        _check_shapes(ckpt.model_config, ds)
        model = ckpt.build_model()
    flip = ckpt.train_config.flip_test if ckpt else True
    scale = ckpt.train_config.target_scale_mm if ckpt else 1000.0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    figures = not args.no_figures

    if args.mode == "reproject":
        input_px = ds.pose2d_px
        if args.input_noise > 0:
            input_px = input_px + args.input_noise * Rng(args.seed).child("input_noise").normal(input_px.shape)
        pred = ds.pose3d_mm if args.use_gt else predict_mm(model, ds, input_px, flip, scale)
        inp, prd, gt = _reproject_rows(ds, pred, input_px)
        rows = [[ds.ids[i] if ds.ids else i, t, _num(inp[i, t]), _num(prd[i, t]), _num(gt[i, t])]
                for i in range(inp.shape[0]) for t in range(inp.shape[1])]
        _write_csv(out / "reproject.csv", ["sequence", "frame", "input_px", "prediction_px", "gt_px"], rows)
        if figures:
            plotting.plot_reprojection(inp.ravel(), prd.ravel(), gt.ravel(), out / "reproject.png")
        for key, v in (("input_px", inp), ("prediction_px", prd), ("gt_px", gt)):
            print(f"mean_{key}={float(v.mean())!r}")
        if not np.all(np.isfinite(prd)):
            raise NonFiniteError("reprojected prediction has non-finite pixel error")
    elif args.mode == "axis":
        pred = predict_mm(model, ds, flip_test=flip, scale_mm=scale)
        per_axis = axis_mpjpe(pred, ds.pose3d_mm, ds.skeleton.root)
        total = mpjpe(pred, ds.pose3d_mm, ds.skeleton.root)
        _write_csv(out / "axis.csv", ["axis", "mpjpe_mm"],
                   [[k, _num(v)] for k, v in per_axis.items()] + [["all", _num(total)]])
        if figures:
            plotting.plot_axis_mpjpe(per_axis, total, out / "axis.png")
        for k, v in per_axis.items():
            print(f"mpjpe_{k}_mm={_num(v)}")
        print(f"mpjpe_mm={_num(total)}")
    elif args.mode == "mi":
        curve = mutual_information_probe(model, ds, args.seed, args.mi_projections, args.mi_bins)
        n_enc = ckpt.model_config.encoder_layers
        kinds = ["encoder"] * n_enc + ["decoder"] * (len(curve) - n_enc)
        _write_csv(out / "mi.csv", ["layer", "stage", "normalized_mi"],
                   [[i + 1, k, _num(v)] for i, (k, v) in enumerate(zip(kinds, curve))])
        if figures:
            plotting.plot_mi_curve(curve, out / "mi.png", n_enc)
        for i, v in enumerate(curve):
            print(f"layer{i + 1}={_num(v)}")
    else:
        sigmas = args.sigmas
        per_seed = [[d for _, d in noise_sweep(model, ds, sigmas, seed=args.seed + k, flip_test=flip, scale_mm=scale)]
                    for k in range(args.noise_seeds)]
        table = np.array(per_seed)
        mean, std = table.mean(0), table.std(0)
        header = ["sigma_px", "delta_mpjpe_mean_mm", "delta_mpjpe_std_mm"] + \
                 [f"seed{args.seed + k}" for k in range(args.noise_seeds)]
        rows = [[_num(s), _num(mean[j]), _num(std[j])] + [_num(v) for v in table[:, j]]
                for j, s in enumerate(sigmas)]
        _write_csv(out / "noise.csv", header, rows)
        if figures:
            plotting.plot_noise_sweep(sigmas, mean, std, out / "noise.png")
        for j, s in enumerate(sigmas):
            print(f"sigma={s!r} delta_mpjpe_mm={float(mean[j])!r} std={float(std[j])!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    try:
        rows = model_gradcheck(cfg.model, args.tolerance, args.h, corrupt=args.break_grad, seed=args.seed or 0)
    except ValueError as exc:
        if str(MAX_PARAMETERS) in str(exc):
            raise ConfigError(str(exc)) from exc
        raise
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    groups = summarize(rows)
    for group in sorted(groups):
        worst, ok = groups[group]
        print(f"{group:16s} max_rel_err={worst:.3e} {'PASS' if ok else 'FAIL'}")
    failed = sorted(g for g, (_, ok) in groups.items() if not ok)
    print(f"parameters={sum(r.numel for r in rows)} tensors={len(rows)} groups={len(groups)} "
          f"failed={','.join(failed) or 'none'}")
    return EXIT_OK if not failed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posemoe", description="Mixture-of-experts 2D-to-3D pose lifting.")
    p.add_argument("--verbose", action="store_true", help="timing lines and debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sequences", type=_positive_int, default=576)
    g.add_argument("--frames", type=_positive_int, default=27)
    g.add_argument("--val-fraction", type=float, default=1.0 / 9.0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_data)

    def config_args(q, default_preset):
        src = q.add_mutually_exclusive_group()
        src.add_argument("--config", help="run config JSON file")
        src.add_argument("--preset", choices=runconfig.PRESETS, default=default_preset)
        q.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        q.add_argument("--seed", type=int, help="training and model seed")

    t = sub.add_parser("train", help="train a model")
    config_args(t, "desk")
    t.add_argument("--data", help="dataset manifest; synthesized in memory from [data] when omitted")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="continue from a last.pmck checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--report", required=True, help="output directory")
    e.add_argument("--gt-as-prediction", action="store_true")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="reprojection, per-axis, MI and noise diagnostics")
    d.add_argument("--ckpt")
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="val")
    d.add_argument("--mode", choices=["reproject", "axis", "mi", "noise"], required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--sigmas", type=_float_list, default=[0.0, 5.0, 10.0, 15.0, 20.0])
    d.add_argument("--noise-seeds", type=_positive_int, default=3)
    d.add_argument("--input-noise", type=float, default=0.0, help="pixel noise added to inputs (reproject)")
    d.add_argument("--use-gt", action="store_true", help="reproject ground-truth 3D instead of predictions")
    d.add_argument("--mi-projections", type=_positive_int, default=64)
    d.add_argument("--mi-bins", type=_positive_int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--no-figures", action="store_true")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    config_args(c, "tiny")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--break-grad", metavar="PARAM", help="test hook: corrupt one parameter's gradient")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, AlignmentError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PseqError, CheckpointError, GenerationError, ProjectionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
