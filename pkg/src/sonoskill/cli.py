"""Command-line pipeline: gen-data -> train-bc -> train-quality -> post-opt -> eval.

Exit codes: 0 ok, 1 validation/config error, 2 divergence, 3 I/O or file format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bc import Dataset, DivergenceDetected, split_dataset, train_bc, train_quality
from .diagnostics import GRAD_TOL, run_all
from .geometry import DegenerateQuaternion, ProbeFrame, tilt_angle
from .guided import QualityHeadUntrained, label_confidence, oracle_controller, post_optimize, rollout_eval
from .policy import init_policy
from .sim import EpisodeDiverged, Simulator

log = logging.getLogger("sonoskill")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    if args.set:
        cfg = io.parse_config("\n".join(args.set), cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _out(cfg: io.RunConfig, name: str) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _path(given, cfg, default_name) -> Path:
    return Path(given) if given else Path(cfg.out_dir) / default_name


def _seeded(tc, seed):
    return dataclasses.replace(tc, seed=seed)


def generate(cfg: io.RunConfig, n_episodes: int) -> Dataset:
    sim = Simulator(cfg.phantom, cfg.sim)
    traces = [sim.record_demonstration(np.random.default_rng([cfg.seed, e]), cfg.truncation, cfg.hold_steps)
              for e in range(n_episodes)]
    return Dataset.from_traces(traces, cfg.sim.image_hw)


def cmd_gen_data(cfg, args) -> int:
    n = max(cfg.episodes, cfg.quality_episodes)
    full = generate(cfg, n)
    demos = full.subset(np.flatnonzero(full.episode_ids < cfg.episodes))
    io.write_dataset(_out(cfg, "demos.usdemo"), demos, cfg.sim.image_hw)
    neg, pos = demos.label_counts()
    print(f"demos: {demos.N} records, {demos.n_episodes} episodes, label0={neg} label1={pos}")
    if cfg.quality_episodes:
        labeled = full.subset(np.flatnonzero(full.episode_ids < cfg.quality_episodes))
        io.write_dataset(_out(cfg, "labeled.usdemo"), labeled, cfg.sim.image_hw)
        neg, pos = labeled.label_counts()
        print(f"labeled: {labeled.N} records, {labeled.n_episodes} episodes, label0={neg} label1={pos}")
    # the echo sits inside out_dir, so the directory itself is left out
    io.save_config(_out(cfg, "run.cfg"), cfg, exclude=("out_dir",))
    return EXIT_OK


def cmd_train_bc(cfg, args) -> int:
    data = io.read_dataset(_path(args.data, cfg, "demos.usdemo"))
    tc = _seeded(cfg.bc, cfg.seed)
    train, val = split_dataset(data, tc.split_ratio, tc.seed)
    params, report = train_bc(init_policy(cfg.arch, cfg.seed), train, val, tc)
    io.write_checkpoint(_path(args.ckpt_out, cfg, "bc.ckpt"), params)
    io.write_rows(_out(cfg, "bc_loss.csv"), report.rows, ["epoch", "train_loss", "val_loss"])
    f = report.final
    print(f"bc: epoch {f['epoch']} train_loss {f['train_loss']:.6g} val_loss {f['val_loss']:.6g} "
          f"(epoch 0 val_loss {report.rows[0]['val_loss']:.6g})")
    return EXIT_OK


def cmd_train_quality(cfg, args) -> int:
    data = io.read_dataset(_path(args.data, cfg, "labeled.usdemo"))
    params = io.read_checkpoint(_path(args.ckpt, cfg, "bc.ckpt"), expect=cfg.arch)
    params, report = train_quality(params, data, _seeded(cfg.quality, cfg.seed))
    io.write_checkpoint(_path(args.ckpt_out, cfg, "quality.ckpt"), params)
    io.write_rows(_out(cfg, "quality.csv"), report.rows,
                  ["epoch", "train_loss", "val_loss", "train_accuracy", "val_accuracy"])
    f = report.final
    print(f"quality: epoch {f['epoch']} train_acc {f['train_accuracy']:.4f} val_acc {f['val_accuracy']:.4f}")
    return EXIT_OK


def cmd_post_opt(cfg, args) -> int:
    params = io.read_checkpoint(_path(args.ckpt, cfg, "quality.ckpt"), expect=cfg.arch)
    if not params.quality_trained:
        raise io.ConfigMismatch("checkpoint has an untrained quality head; run train-quality first")
    sim = Simulator(cfg.phantom, cfg.sim)
    params, (report,) = post_optimize(params, sim, cfg.guide, seed=cfg.seed)
    io.write_checkpoint(_path(args.ckpt_out, cfg, "post.ckpt"), params)
    io.write_rows(_out(cfg, "post_opt.csv"), report.rows)
    f = report.final
    print(f"post-opt: epoch {f['epoch']} train_loss {f['train_loss']:.6g} buffer {f['buffer_size']} "
          f"mean_q {f['mean_q']:.4f}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    sim = Simulator(cfg.phantom, cfg.sim)
    n = cfg.eval_episodes if args.episodes is None else args.episodes
    steps = cfg.eval_max_steps if args.max_steps is None else args.max_steps
    if args.oracle:
        conf = label_confidence(sim)
        if args.ckpt:
            params = io.read_checkpoint(args.ckpt, expect=cfg.arch)

            def conf(obs, frame):
                return params.quality(obs)
        traces, summary = rollout_eval(oracle_controller(sim), sim, n, steps, cfg.eval_seed, conf)
    else:
        params = io.read_checkpoint(_path(args.ckpt, cfg, "post.ckpt"), expect=cfg.arch)
        traces, summary = rollout_eval(params, sim, n, steps, cfg.eval_seed)
    rows = [{"episode_id": e, "step": k, "q": s.q, "label": s.label}
            for e, tr in enumerate(traces) for k, s in enumerate(tr.steps)]
    io.write_rows(_path(args.csv, cfg, "eval.csv"), rows, ["episode_id", "step", "q", "label"])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    results = run_all(fault=args.inject_fault)
    bad = 0
    for name, err in results.items():
        ok = err < GRAD_TOL
        bad += not ok
        print(f"{name:16s} max_rel_err {err:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if bad == 0 else EXIT_CONFIG


def cmd_plot_data(cfg, args) -> int:
    """Per-record trajectory table for external plotting."""
    data = io.read_dataset(_path(args.data, cfg, "demos.usdemo"))
    sim = Simulator(cfg.phantom, cfg.sim)
    rows = []
    for i in range(data.N):
        frame = ProbeFrame(data.positions[i], data.orientations[i])
        rows.append({
            "episode_id": int(data.episode_ids[i]), "step": int(data.steps[i]),
            "x": float(data.positions[i, 0]), "y": float(data.positions[i, 1]), "z": float(data.positions[i, 2]),
            "offset": sim.lateral_offset(frame), "tilt_deg": float(np.rad2deg(tilt_angle(frame.orientation))),
            "force_z": float(data.wrenches[i, 2]), "step_norm": float(np.linalg.norm(data.actions[i, :3])),
            "label": int(data.labels[i]),
        })
    cols = ["episode_id", "step", "x", "y", "z", "offset", "tilt_deg", "force_z", "step_norm", "label"]
    io.write_rows(_path(args.csv, cfg, "trajectories.csv"), rows, cols)
    print(f"plot-data: {len(rows)} rows")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-bc": cmd_train_bc,
    "train-quality": cmd_train_quality,
    "post-opt": cmd_post_opt,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "plot-data": cmd_plot_data,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sonoskill", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help=f"output directory (default ${io.OUT_ENV} or ./runs)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-bc", "train-quality", "plot-data"):
            p.add_argument("--data", help="dataset file")
        if name in ("train-quality", "post-opt", "eval"):
            p.add_argument("--ckpt", help="input checkpoint")
        if name in ("train-bc", "train-quality", "post-opt"):
            p.add_argument("--ckpt-out", help="output checkpoint")
        if name in ("eval", "plot-data"):
            p.add_argument("--csv", help="output CSV path")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="roll out the scripted controller instead")
            p.add_argument("--episodes", type=int)
            p.add_argument("--max-steps", type=int)
        if name == "gradcheck":
            p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except io.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (io.ConfigMismatch, QualityHeadUntrained) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceDetected, EpisodeDiverged, DegenerateQuaternion) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
