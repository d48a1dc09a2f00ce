"""Command-line entry point.

Exit codes: 0 success, 1 a check reported failure (``invariance``),
2 input or configuration error, 3 registration failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import ManifestRecord, load_checkpoint, load_cloud, load_manifest, save_checkpoint, save_ply, \
    save_transform, synth_pair, write_manifest
from .encoders import init_params
from .errors import InsufficientCorrespondencesError, RegistrationFailedError, RigaError
from .geom import RigidTransform
from .matcher import CorrespondenceSet
from .metrics import fmr, ground_truth_correspondences, inlier_ratio, registration_recall, rmse2, rre, rte
from .pipeline import invariance_sweep, prepare_frame, register_pair
from .solver import ransac_register
from .train import TrainConfig, train

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_REGISTRATION = 0, 1, 2, 3


class InputError(Exception):
    """Raised for user-facing input problems that map to exit code 2."""


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _write_report(path, entries: list[tuple[str, object]], cfg: RunConfig) -> str:
    lines = [f"{k}={_fmt(v)}" for k, v in entries] + [f"config.{line}" for line in cfg.lines()]
    text = "\n".join(lines) + "\n"
    if path:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise InputError(f"cannot write report {path}: {exc.strerror}") from None
    else:
        sys.stdout.write(text)
    return text


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _params(cfg: RunConfig, checkpoint, seed=None):
    fresh = init_params(cfg.init_seed if seed is None else seed, cfg.model())
    if checkpoint is None:
        return fresh
    if not Path(checkpoint).is_file():
        raise InputError(f"checkpoint not found: {checkpoint}")
    return load_checkpoint(checkpoint, expected=fresh)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = []
        base = cfg.synth_seed if args.seed is None else args.seed
        for k in range(args.pairs):
            pair = synth_pair(cfg.synth(seed=base + k))
            src, tgt = out / f"pair_{k:04d}_src.ply", out / f"pair_{k:04d}_tgt.ply"
            save_ply(src, pair.source)
            save_ply(tgt, pair.target)
            records.append(ManifestRecord(src, tgt, pair.T_gt))
        write_manifest(out / "manifest.txt", records)
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc.strerror}") from None
    print(f"wrote {args.pairs} pairs and {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _config(args)
    params = _params(cfg, args.checkpoint, args.seed)
    src, tgt = _read_cloud(args.src), _read_cloud(args.tgt)
    num_corr = args.num_corr if args.num_corr is not None else cfg.num_corr
    try:
        out = register_pair(src, tgt, params, cfg.model(), cfg.pipeline(), cfg.ransac(), num_corr)
    except (RegistrationFailedError, InsufficientCorrespondencesError) as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        if args.report:
            _write_report(args.report, [("status", "failed"), ("reason", str(exc))], cfg)
        return EXIT_REGISTRATION
    if args.out:
        try:
            save_transform(args.out, out.transform)
        except OSError as exc:
            raise InputError(f"cannot write {args.out}: {exc.strerror}") from None
    entries = [("status", "ok"), ("correspondences", len(out.correspondences)),
               ("inliers", out.ransac.inlier_count), ("best_iteration", out.ransac.best_iteration),
               ("coarse_pairs", len(out.match.coarse)), ("skipped_groups", out.match.skipped_groups),
               ("runtime_s", round(out.runtime_s, 6))]
    _write_report(args.report, entries, cfg)
    return EXIT_OK


def _read_cloud(path):
    if not Path(path).is_file():
        raise InputError(f"file not found: {path}")
    return load_cloud(path)


def _records_with_gt(path) -> list[ManifestRecord]:
    if not Path(path).is_file():
        raise InputError(f"manifest not found: {path}")
    records = load_manifest(path)
    if not records:
        raise InputError("manifest has no records")
    missing = [str(r.source) for r in records if r.transform is None]
    if missing:
        raise InputError(f"manifest record without ground truth: {missing[0]}")
    return records


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = cfg.train_seed if args.seed is None else args.seed
    steps = cfg.steps if args.steps is None else args.steps
    records = _records_with_gt(args.data)
    pcfg, mcfg, lcfg = cfg.pipeline(), cfg.model(), cfg.loss()
    frames = [(prepare_frame(_read_cloud(r.source), pcfg), prepare_frame(_read_cloud(r.target), pcfg),
               r.transform) for r in records]
    params = init_params(cfg.init_seed, mcfg)
    tcfg = TrainConfig(steps=steps, lr=cfg.lr, lr_decay=cfg.lr_decay, beta1=cfg.adam_beta1,
                       beta2=cfg.adam_beta2, eps=cfg.adam_eps, seed=seed)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.txt")
    try:
        with open(log_path, "w") as fh:
            train(params, frames, mcfg, pcfg, lcfg, tcfg, callback=lambda r: fh.write(r.line() + "\n"))
        save_checkpoint(params, args.out, {"seed": seed, "steps": steps, "config_hash": cfg.model_hash()})
    except OSError as exc:
        raise InputError(f"cannot write training outputs: {exc.strerror}") from None
    print(f"trained {steps} steps; checkpoint {args.out}; loss log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    records = _records_with_gt(args.data)
    params = None if args.oracle else _params(cfg, args.checkpoint, args.seed)
    num_corr = args.num_corr if args.num_corr is not None else cfg.num_corr
    thr = cfg.metrics()
    entries, irs, rmses, rres, rtes = [], [], [], [], []
    for k, r in enumerate(records):
        src, tgt, T_gt = _read_cloud(r.source), _read_cloud(r.target), r.transform
        try:
            if args.oracle:
                u, v = ground_truth_correspondences(src.points, tgt.points, T_gt, thr.tau1)
                corr = CorrespondenceSet(u, v, np.ones(u.size)).top(num_corr)
                T = ransac_register(corr, src.points, tgt.points, cfg.ransac()).transform
            else:
                out = register_pair(src, tgt, params, cfg.model(), cfg.pipeline(), cfg.ransac(), num_corr)
                corr, T = out.correspondences, out.transform
            ok = True
        except (RegistrationFailedError, InsufficientCorrespondencesError):
            corr, T, ok = CorrespondenceSet.empty(), RigidTransform.identity(), False
        ir = inlier_ratio(src.points[corr.src], tgt.points[corr.tgt], T_gt, thr.tau1) if len(corr) else 0.0
        gu, gv = ground_truth_correspondences(src.points, tgt.points, T_gt, thr.tau1)
        rmse = rmse2(src.points[gu], tgt.points[gv], T) if gu.size else float("inf")
        irs.append(ir), rmses.append(rmse), rres.append(rre(T, T_gt)), rtes.append(rte(T, T_gt))
        entries += [(f"pair{k}.status", "ok" if ok else "failed"), (f"pair{k}.correspondences", len(corr)),
                    (f"pair{k}.ir", ir), (f"pair{k}.rre_deg", rres[-1]), (f"pair{k}.rte", rtes[-1]),
                    (f"pair{k}.rmse", rmse)]
    summary = [("pairs", len(records)), ("num_corr", num_corr), ("ir", float(np.mean(irs))),
               ("fmr", fmr(irs, thr.tau2)), ("rr", registration_recall(rmses, thr.tau3)),
               ("mean_rre_deg", float(np.mean(rres))), ("mean_rte", float(np.mean(rtes))),
               ("median_rre_deg", float(np.median(rres))), ("median_rte", float(np.median(rtes)))]
    _write_report(args.report, summary + entries, cfg)
    return EXIT_OK


def cmd_invariance(args) -> int:
    cfg = _config(args)
    if args.use_raw_xyz:
        cfg = cfg.with_overrides(local_features="xyz")
    seed = cfg.init_seed if args.seed is None else args.seed
    params = init_params(seed, cfg.model())
    rng = np.random.default_rng(seed)
    worst: dict = {}
    diffs = 0
    for trial in range(args.trials):
        pair = synth_pair(cfg.synth(seed=seed + trial))
        motions = [RigidTransform.random(rng, trans_range=cfg.trans_range) for _ in range(args.rotations)]
        for dev, diff in invariance_sweep(pair.source, pair.target, motions, params, cfg.model(),
                                          cfg.pipeline()):
            for key, v in dev.items():
                worst[key] = max(worst.get(key, 0.0), v)
            diffs += diff
    max_dev = max(worst.values()) if worst else 0.0
    passed = max_dev <= args.tolerance and diffs == 0
    entries = [("trials", args.trials), ("rotations", args.rotations),
               ("local_features", cfg.local_features), ("max_deviation", max_dev)]
    entries += [(f"deviation.{k}", v) for k, v in worst.items()]
    entries += [("index_diff", diffs), ("passed", passed)]
    _write_report(args.report, entries, cfg)
    return EXIT_OK if passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riga", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value run configuration file")
        return p

    p = common(sub.add_parser("synth", help="write synthetic PLY pairs and a manifest"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("register", help="estimate the transform mapping --src onto --tgt"))
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, help="weight seed when no checkpoint is given")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", help="4x4 transform output file")
    p.add_argument("--report")
    p.add_argument("--num-corr", type=int)
    p.set_defaults(func=cmd_register)

    p = common(sub.add_parser("train", help="train on a manifest with ground truth"))
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="loss log path (default: <out>.loss.txt)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="registration metrics over a manifest"))
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--num-corr", type=int, choices=(5000, 2500, 1000, 500, 250))
    p.add_argument("--oracle", action="store_true", help="use ground-truth correspondences")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("invariance", help="descriptor deviation under random rigid motions"))
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=3, help="number of synthetic pairs")
    p.add_argument("--rotations", type=int, default=10, help="random motions per pair")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--use-raw-xyz", action="store_true",
                   help="replace local PPFs by node-relative coordinates (negative control)")
    p.add_argument("--report")
    p.set_defaults(func=cmd_invariance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, RigaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
