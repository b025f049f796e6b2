"""Command-line pipeline: simulate, train, track, eval, gradcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metaupdater as mu_mod
from .config import ConfigError, RunConfig
from .framework import SimTrackerEnv, read_jsonl, write_jsonl
from .gradcheck import CASES, TOLERANCE, run_suite
from .metaupdater import CheckpointError, SingleClassError
from .metrics import SUCCESS_THRESHOLDS, EvalRun, as_number, f_curve, ope_curves, summarize, update_stats, write_csv, write_json
from .simulator import read_sequence, write_sequence
from .training import Label, iterative_train

log = logging.getLogger("ltmu")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4
CONFIG_NAME = "run.cfg"


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _load_config(path, seed=None) -> RunConfig:
    cfg = cfgmod.load(path) if path else RunConfig()
    return cfg.with_seed(seed) if seed is not None else cfg


def _dataset_config(data: Path, path, seed=None) -> RunConfig:
    """Explicit --config wins; otherwise the config stored with the dataset."""
    if path is None and (data / CONFIG_NAME).exists():
        path = data / CONFIG_NAME
    return _load_config(path, seed)


def _read_split(data: Path, split: str):
    d = data / split
    files = sorted(d.glob("seq_*.jsonl"))
    if not files:
        raise DataError(f"no sequences in {d}")
    out = []
    for f in files:
        try:
            world, sid, frames = read_sequence(f)
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise DataError(f"{f}: {e}") from None
        out.append((world, sid, frames))
    return out


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {path}: {e.strerror}") from None
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    splits = {s: cfg.bench.sequences(cfg.world, s) for s in ("train", "eval")}
    for s, seqs in splits.items():
        d = _prepare_out(out / s)
        for sid, frames in seqs:
            write_sequence(d / f"seq_{sid:05d}.jsonl", frames, cfg.world, sid)
    (out / CONFIG_NAME).write_text(cfgmod.dump(cfg))
    for s, seqs in splits.items():
        print(f"{s}\t{len(seqs)} sequences\t{sum(len(f) for _, f in seqs)} frames")
    return EXIT_OK


def _env(cfg: RunConfig, world) -> SimTrackerEnv:
    return SimTrackerEnv(world, cfg.tracker, gate_verifier=cfg.loop.gate_verifier, t_s=cfg.mu.t_s)


def cmd_train(args) -> int:
    data = Path(args.data)
    cfg = _dataset_config(data, args.config, args.seed)
    tcfg = cfg.train
    if args.iterations is not None:
        tcfg = dataclasses.replace(tcfg, iterations=args.iterations)
    K = args.K if args.K is not None else cfg.loop.K
    if K < 1 or tcfg.iterations < 1:
        raise ConfigError("K and iterations must be >= 1")
    seqs = _read_split(data, "train")
    world = seqs[0][0]
    env = _env(cfg, world)
    out = Path(args.out)
    t0 = time.time()

    def on_round(k, mu, rl):
        print(f"round {k + 1}/{K}\tslices {rl.slices}\tpositive {rl.positives}\tnegative {rl.negatives}"
              f"\tloss {rl.final_loss:.4f}\t{time.time() - t0:.0f}s", flush=True)

    models, logs = iterative_train(env, [(sid, frames) for _, sid, frames in seqs], K=K, seed=cfg.seed,
                                   train_cfg=tcfg, model_cfg=cfg.mu, on_round=on_round)
    _prepare_out(out)
    for k, m in enumerate(models, 1):
        mu_mod.save(m, out / f"mu_{k}.ckpt")
    write_json(out / "train_log.json", {
        "seed": cfg.seed, "K": K, "iterations": tcfg.iterations,
        "rounds": [dict(rl.to_json(), loss=[float(x) for x in rl.losses]) for rl in logs]})
    print(f"wrote {len(models)} checkpoints to {out}")
    return EXIT_OK


def cmd_track(args) -> int:
    data = Path(args.data)
    cfg = _dataset_config(data, args.config)
    model = None
    if not args.no_mu:
        try:
            model = mu_mod.load(args.checkpoint)
        except OSError as e:
            raise DataError(f"cannot read checkpoint {args.checkpoint}: {e.strerror}") from None
        except CheckpointError as e:
            raise DataError(f"{args.checkpoint}: {e}") from None
        mc = model.config
        if mc.no_response_mode != cfg.mu.no_response_mode or mc.t_s != cfg.mu.t_s:
            raise ConfigError(f"checkpoint expects {mc.cue_dim}-dim cues over {mc.t_s} frames, config gives "
                              f"{cfg.mu.cue_dim}-dim over {cfg.mu.t_s}")
    seqs = _read_split(data, args.split)
    env = _env(cfg, seqs[0][0])
    outs = env.rollouts([(sid, frames) for _, sid, frames in seqs], model)
    out = _prepare_out(Path(args.out))
    results, updates = [], []
    for (_, sid, _), r in zip(seqs, outs):
        results += [dict(seq=sid, **x.to_json()) for x in r.results]
        updates += [dict(seq=sid, **x.to_json()) for x in r.updates]
    write_jsonl(out / "results.jsonl", results)
    write_jsonl(out / "updates.jsonl", updates)
    us = update_stats(u for r in outs for u in r.updates)
    print(f"tracked {len(seqs)} sequences\tupdates {sum(u['u'] for u in updates)}/{len(updates)}"
          f"\tupdate_pr {_fmt(us.precision)}\tupdate_re {_fmt(us.recall)}\tupdate_tnr {_fmt(us.tnr)}")
    return EXIT_OK


def _fmt(v):
    v = as_number(v)
    return "n/a" if v is None else f"{v:.3f}"


def _group(rows, path):
    by = {}
    for r in rows:
        if "seq" not in r:
            raise DataError(f"{path}: row without a sequence id")
        by.setdefault(r["seq"], []).append(r)
    return by


def cmd_eval(args) -> int:
    res_dir, data = Path(args.results), Path(args.data)
    cfg = _dataset_config(data, args.config)
    try:
        results = _group(read_jsonl(res_dir / "results.jsonl"), res_dir / "results.jsonl")
        upath = res_dir / "updates.jsonl"
        updates = _group(read_jsonl(upath), upath) if upath.exists() else None
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read results in {res_dir}: {e}") from None
    seqs = {sid: frames for _, sid, frames in _read_split(data, args.split)}
    if set(results) != set(seqs):
        raise DataError(f"results cover sequences {sorted(results)[:5]}..., ground truth {sorted(seqs)[:5]}...")
    runs, logs, rows = [], [], []
    for sid in sorted(seqs):
        frames, rs = seqs[sid], results[sid]
        if [r["frame"] for r in rs] != list(range(len(frames))):
            raise DataError(f"sequence {sid}: {len(rs)} result rows for {len(frames)} frames (misaligned)")
        run = EvalRun.from_results(rs, [f.box for f in frames])
        lg = None
        if updates is not None:
            ur = updates.get(sid, [])
            if len(ur) != len(frames):
                raise DataError(f"sequence {sid}: {len(ur)} update rows for {len(frames)} frames (misaligned)")
            lg = [(u["u"], Label.from_code(u["l"])) for u in ur]
            logs.append(lg)
        runs.append(run)
        rows.append(dict(seq=sid, **summarize([run], [lg] if lg is not None else None)))
    summary = summarize(runs, logs if updates is not None else None)
    rows.append(dict(seq="all", **summary))
    taus, pr, re, f = f_curve(runs)
    ope = ope_curves(runs, cfg.eval.pixel_threshold)
    keep = np.isfinite(taus)
    curves = {"success": {"threshold": SUCCESS_THRESHOLDS.tolist(), "rate": ope.success.tolist()},
              "f_vs_threshold": {"threshold": taus[keep].tolist(), "pr": pr[keep].tolist(),
                                 "re": re[keep].tolist(), "f": f[keep].tolist()}}
    out = _prepare_out(Path(args.out))
    write_csv(out / "metrics.csv", rows)
    write_json(out / "summary.json", summary)
    write_json(out / "curves.json", curves)
    if cfg.eval.figures and not args.no_figures:
        from .plotting import f_threshold_plot, success_plot
        success_plot(out / "success.png", SUCCESS_THRESHOLDS, ope.success, ope.auc)
        f_threshold_plot(out / "f_threshold.png", taus, pr, re, f)
    print("metric\tvalue")
    for k, v in summary.items():
        print(f"{k}\t{'n/a' if v is None else (f'{v:.4f}' if isinstance(v, float) else v)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.inject_fault is not None and args.inject_fault not in CASES:
        raise ConfigError(f"unknown layer {args.inject_fault!r}")
    results = run_suite(args.seed, args.instances, fault=args.inject_fault)
    print("layer\tmax_rel_error\tinstances\tstatus")
    for r in results:
        print(f"{r.layer}\t{r.max_error:.3e}\t{r.instances}\t{'pass' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltmu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate train/eval sequences")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="iterative meta-updater training")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--K", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="roll the tracker over a split")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--split", default="eval", choices=("train", "eval"))
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--no-mu", action="store_true", help="always update (baseline)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="metrics, curves and figures for tracked results")
    s.add_argument("--results", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--split", default="eval", choices=("train", "eval"))
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--inject-fault", metavar="LAYER", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SingleClassError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
