"""``colonmap`` command line: synth, intrinsics, losses, eval, selfcheck.

Every command prints one JSON document on stdout that echoes the effective
configuration and the tool version; diagnostics go to stderr. Exit codes:
0 success, 1 self-check failure, 2 input or spec error, 3 degenerate input.
Settings merge as defaults <- ``--config`` JSON file <- command-line flags.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .arraycore import ShapeError
from .camera import DegenerateInputError, estimate_focal_weiszfeld
from .dataio import (FormatError, LayoutError, load_dataset, load_json_config, read_fmap, write_dataset)
from .geometry import (DegenerateConfigurationError, InsufficientSupportError, PointMap,
                       read_trajectory)
from .losses import EmptySupportError, LossConfig
from .metrics import (DegenerateMetricError, align_trajectory, ate, depth_metrics, pointmap_metrics, rpe,
                      snippet_ate)
from .pipeline import MissingFieldError, pair_losses, translation_perturbation
from .selfcheck import format_table, run_selfcheck
from .synth import InvalidSceneError, render_sequence, scene_from_dict, thread_count

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_DEGENERATE = 0, 1, 2, 3


class InputError(Exception):
    pass


class DegenerateError(Exception):
    pass


def merge_config(defaults: dict, file_path: Optional[str], flags: dict) -> dict:
    """defaults <- JSON file <- explicit flags; unknown keys are rejected."""
    cfg = dict(defaults)
    if file_path:
        try:
            loaded = load_json_config(file_path)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {file_path}: {exc}")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def _emit(command: str, config: dict, result: dict) -> None:
    doc = {"command": command, "version": __version__, "config": config, **result}
    sys.stdout.write(json.dumps(doc, sort_keys=True, allow_nan=False) + "\n")


def _parse_perturb(spec: Optional[str]) -> dict:
    if not spec:
        return {}
    out = {}
    for item in spec.split(","):
        key, _, val = item.partition("=")
        if key != "pose_trans":
            raise InputError(f"unsupported perturbation {key!r} (supported: pose_trans)")
        try:
            out[key] = float(val)
        except ValueError:
            raise InputError(f"bad perturbation value {val!r}")
        if out[key] < 0:
            raise InputError("perturbation magnitude must be non-negative")
    return out


def cmd_synth(args) -> int:
    try:
        spec_dict = load_json_config(args.spec)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read scene spec: {exc}")
    try:
        spec = scene_from_dict(spec_dict)
        packets = render_sequence(spec, threads=thread_count())
    except (InvalidSceneError, ValueError, TypeError) as exc:
        raise InputError(f"invalid scene spec: {exc}")
    write_dataset(args.out, packets, spec.intrinsics, spec.trajectory)
    _emit("synth", spec_dict, {"frames": len(packets),
                               "width": spec.intrinsics.width, "height": spec.intrinsics.height})
    return EXIT_OK


INTRINSICS_DEFAULTS = {"max_iters": 100, "tol": 1e-10, "cx": None, "cy": None}


def cmd_intrinsics(args) -> int:
    cfg = merge_config(INTRINSICS_DEFAULTS, args.config,
                       {"max_iters": args.max_iters, "tol": args.tol, "cx": args.cx, "cy": args.cy})
    try:
        xyz = read_fmap(args.pointmap).astype(np.float64)
        conf = read_fmap(args.conf).astype(np.float64)[..., 0] if args.conf else None
    except (OSError, FormatError) as exc:
        raise InputError(str(exc))
    if xyz.shape[2] != 3:
        raise InputError(f"point map needs 3 channels, got {xyz.shape[2]}")
    if conf is not None and conf.shape != xyz.shape[:2]:
        raise InputError(f"confidence grid {conf.shape} does not match point map {xyz.shape[:2]}")
    principal = None
    if cfg["cx"] is not None or cfg["cy"] is not None:
        h, w = xyz.shape[:2]
        principal = (float(cfg["cx"] if cfg["cx"] is not None else (w - 1) / 2.0),
                     float(cfg["cy"] if cfg["cy"] is not None else (h - 1) / 2.0))
    try:
        est = estimate_focal_weiszfeld(PointMap(xyz), confidence=conf, max_iters=int(cfg["max_iters"]),
                                       tol=float(cfg["tol"]), principal=principal)
    except (DegenerateInputError, ValueError) as exc:
        raise DegenerateError(str(exc))
    _emit("intrinsics", cfg, {"focal": est.focal, "iterations": est.iterations,
                              "focal_lsq": est.focal_lsq, "converged": est.converged})
    return EXIT_OK


def cmd_losses(args) -> int:
    loss_defaults = LossConfig().to_dict()
    cfg = merge_config(loss_defaults, args.config, {})
    try:
        loss_cfg = LossConfig.from_dict(cfg)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad loss config: {exc}")
    perturb = _parse_perturb(args.perturb)
    if perturb and args.seed is None:
        raise InputError("--perturb requires --seed")
    try:
        ds = load_dataset(args.dataset)
    except LayoutError as exc:
        raise InputError(str(exc))
    t = args.t
    if not 1 <= t < len(ds):
        raise InputError(f"--t must lie in [1, {len(ds) - 1}] for a pair (t, t-1), got {t}")
    prev, cur = ds[t - 1], ds[t]
    K = ds.intrinsics
    try:
        report = pair_losses(K, prev, cur, loss_cfg)
        result = {"t": t, "losses": report}
        if perturb:
            T = prev.pose.inverse() @ cur.pose
            delta = translation_perturbation(perturb["pose_trans"], args.seed)
            perturbed = pair_losses(K, prev, cur, loss_cfg, T_t_to_tm1=T.with_translation(T.t + delta))
            result["perturbation"] = {
                "pose_trans": perturb["pose_trans"],
                "seed": args.seed,
                "delta": delta.tolist(),
                "predicted_t_pose_increase": float(np.abs(delta).sum()),
                "t_pose_increase": perturbed["t_pose"] - report["t_pose"],
                "losses": perturbed,
            }
    except MissingFieldError as exc:
        raise InputError(f"missing packet field: {exc}")
    except EmptySupportError as exc:
        raise DegenerateError(str(exc))
    except ValueError as exc:
        raise InputError(str(exc))
    _emit("losses", {**cfg, "perturb": perturb or None, "seed": args.seed}, result)
    return EXIT_OK


EVAL_DEFAULTS = {"align": None, "align_scope": "subset", "delta": 1, "snippet_len": 5,
                 "median_scaling": True, "clamp": None, "frames": None, "sample": None, "seed": None}


def _select_frames(n: int, cfg: dict) -> list:
    if cfg["frames"] is not None and cfg["sample"] is not None:
        raise InputError("--frames and --sample are mutually exclusive")
    if cfg["frames"] is not None:
        frames = [int(i) for i in cfg["frames"]]
        bad = [i for i in frames if not 0 <= i < n]
        if bad:
            raise InputError(f"frame indices out of range [0, {n}): {bad}")
        return frames
    if cfg["sample"] is not None:
        if cfg["seed"] is None:
            raise InputError("--sample requires --seed")
        k = int(cfg["sample"])
        if not 1 <= k <= n:
            raise InputError(f"cannot sample {k} of {n} frames")
        return sorted(int(i) for i in np.random.default_rng(int(cfg["seed"])).choice(n, k, replace=False))
    return list(range(n))


def _grid_files(path: str, name: str) -> list:
    p = Path(path)
    if p.is_dir():
        files = sorted((p / "frames").glob(f"*.{name}"))
        if not files:
            raise InputError(f"{path}: no frames/*.{name} files")
        return files
    return [p]


def _metric_list(values: dict, cfg: dict) -> list:
    return [{"metric": k, "value": v, "config": cfg} for k, v in values.items()]


def cmd_eval(args) -> int:
    frames_flag = None
    if args.frames:
        try:
            frames_flag = [int(x) for x in args.frames.split(",")]
        except ValueError:
            raise InputError(f"bad --frames list {args.frames!r}")
    cfg = merge_config(EVAL_DEFAULTS, args.config,
                       {"align": args.align, "align_scope": args.align_scope, "delta": args.delta,
                        "snippet_len": args.snippet_len, "frames": frames_flag, "sample": args.sample,
                        "seed": args.seed})
    cfg["mode"] = args.mode
    mode = args.mode
    try:
        if mode in ("traj", "traj-snippet"):
            values = _eval_traj(args, cfg)
        else:
            values = _eval_grids(args, cfg)
    except (ShapeError, FormatError, OSError) as exc:
        raise InputError(str(exc))
    except (DegenerateMetricError, DegenerateConfigurationError, InsufficientSupportError) as exc:
        raise DegenerateError(str(exc))
    _emit("eval", cfg, {"metrics": _metric_list(values, {k: cfg[k] for k in ("mode", "align")})})
    return EXIT_OK


def _eval_traj(args, cfg: dict) -> dict:
    try:
        pred = read_trajectory(args.pred)
        gt = read_trajectory(args.gt)
    except ValueError as exc:
        raise InputError(str(exc))
    if len(pred) != len(gt):
        raise InputError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    frames = _select_frames(len(gt), cfg)
    sub_p, sub_g = pred.subset(frames), gt.subset(frames)
    if args.mode == "traj-snippet":
        return {"snippet_ate": snippet_ate(sub_p, sub_g, int(cfg["snippet_len"]))}
    align = cfg["align"] or "sim3"
    cfg["align"] = align
    if cfg["align_scope"] == "sequence":
        S = align_trajectory(pred, gt, align)
        value = ate(sub_p, sub_g, transform=S)
    elif cfg["align_scope"] == "subset":
        value = ate(sub_p, sub_g, align)
    else:
        raise InputError(f"unknown align_scope {cfg['align_scope']!r}")
    out = {"ate": value}
    if len(frames) > int(cfg["delta"]):
        rt, rr = rpe(sub_p, sub_g, int(cfg["delta"]))
        out.update(rpe_trans=rt, rpe_rot_deg=rr)
    return out


def _eval_grids(args, cfg: dict) -> dict:
    depth = args.mode == "depth"
    name = "depth.fmap" if depth else "pm_self.fmap"
    pred_files = _grid_files(args.pred, name)
    gt_files = _grid_files(args.gt, name)
    if len(pred_files) != len(gt_files):
        raise InputError(f"frame counts differ: {len(pred_files)} vs {len(gt_files)}")
    frames = _select_frames(len(gt_files), cfg)
    rows = []
    for i in frames:
        pred = read_fmap(pred_files[i]).astype(np.float64)
        gt = read_fmap(gt_files[i]).astype(np.float64)
        if pred.shape != gt.shape:
            raise InputError(f"frame {i}: shapes differ {pred.shape} vs {gt.shape}")
        if depth:
            clamp = tuple(cfg["clamp"]) if cfg["clamp"] is not None else None
            r = depth_metrics(pred, gt, gt[..., 0] > 0, apply_median_scaling=bool(cfg["median_scaling"]),
                              clamp=clamp)
        else:
            if pred.shape[2] != 3:
                raise InputError(f"frame {i}: point maps need 3 channels")
            r = pointmap_metrics(PointMap(pred), PointMap(gt), align=(cfg["align"] or "none") == "sim3")
        rows.append(r.to_dict())
    keys = [k for k in rows[0] if isinstance(rows[0][k], float)]
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    if not depth:
        cfg["pointmap_definition"] = rows[0]["definition"]
    return out


def cmd_selfcheck(args) -> int:
    results = run_selfcheck()
    sys.stderr.write(format_table(results) + "\n")
    ok = all(r.passed for r in results)
    _emit("selfcheck", {}, {"passed": ok,
                            "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]})
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colonmap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"colonmap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene into a dataset directory")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("intrinsics", help="estimate the focal length of a point map")
    s.add_argument("--pointmap", required=True)
    s.add_argument("--conf")
    s.add_argument("--config")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--cx", type=float)
    s.add_argument("--cy", type=float)
    s.set_defaults(func=cmd_intrinsics)

    s = sub.add_parser("losses", help="evaluate all loss terms for the frame pair (t, t-1)")
    s.add_argument("--dataset", required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--config")
    s.add_argument("--perturb", help="e.g. pose_trans=0.1")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_losses)

    s = sub.add_parser("eval", help="depth, trajectory and point-map metrics")
    s.add_argument("--mode", required=True, choices=("depth", "traj", "traj-snippet", "pointmap"))
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--align", choices=("sim3", "se3", "none"))
    s.add_argument("--align-scope", choices=("subset", "sequence"))
    s.add_argument("--delta", type=int)
    s.add_argument("--snippet-len", type=int)
    s.add_argument("--frames", help="comma-separated frame indices")
    s.add_argument("--sample", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("selfcheck", help="run the embedded oracle suite")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        sys.stderr.write(f"colonmap {args.command}: {exc}\n")
        return EXIT_INPUT
    except DegenerateError as exc:
        sys.stderr.write(f"colonmap {args.command}: degenerate input: {exc}\n")
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
