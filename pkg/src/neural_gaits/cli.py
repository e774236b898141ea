"""Command-line entry point.

Exit codes: 0 success, 1 usage or runtime error, 2 scientific failure
(loss above threshold, fall, no improvement, failed certification).

Primary artifacts are byte-reproducible; wall-clock times live only in
``*.meta.json`` sidecars.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import config as C
from . import dynamics as dyn
from . import policy as pol
from . import residual as rs
from . import simulator as sim
from . import training as tr
from . import verification as ver
from .trajectory import LogFormatError, load_log, save_log

OK, ERROR, FAILED = 0, 1, 2


def _json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _out_dir(cfg, override=None):
    out = override or cfg.resolved_output_dir()
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(path):
    if path is None:
        return C.default_config()
    return C.load(path)


# ----------------------------------------------------------------------------
# subcommands


def cmd_train(config_path, out=None, quiet=False):
    cfg = _load_config(config_path)
    out = _out_dir(cfg, out)
    say = (lambda *_: None) if quiet else print

    def log(row):
        if row["epoch"] % 50 == 0 or row["epoch"] == cfg.train.epochs - 1:
            say(f"epoch {row['epoch']:5d}  loss {row['loss']:.4e}  step {row['step_size']:.1e}")

    ckpt_dir = os.path.join(out, "checkpoints") if cfg.train.checkpoint_every else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    res = tr.train_policy(cfg.train, cfg.specs, cfg.regions, cfg.nominal, log=log, checkpoint_dir=ckpt_dir)
    pol.save(res.policy, os.path.join(out, "policy.json"))
    tr.write_history(res.history, os.path.join(out, "history.csv"))
    if res.prior_history:
        with open(os.path.join(out, "prior_history.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("step", "loss"))
            for row in res.prior_history:
                w.writerow((row["step"], repr(float(row["loss"]))))
    prior = None if math.isnan(res.prior_loss) else res.prior_loss
    converged = res.best_loss <= cfg.loss_threshold
    _json({"best_epoch": res.best_epoch, "best_loss": res.best_loss, "threshold": cfg.loss_threshold,
           "converged": converged, "prior_loss": prior, "initial_eval": res.initial_eval, "final_eval": res.final_eval,
           "config": cfg.to_dict()}, os.path.join(out, "summary.json"))
    _json({"seconds": res.seconds, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")},
          os.path.join(out, "summary.meta.json"))
    if prior is not None:
        say(f"phase prior loss {prior:.4e}")
    say(f"best loss {res.best_loss:.4e} at epoch {res.best_epoch} "
        f"({'below' if converged else 'above'} threshold {cfg.loss_threshold:g})")
    return OK if converged else FAILED


def cmd_rollout(config_path, checkpoint, plant="nominal", out=None, quiet=False):
    cfg = _load_config(config_path)
    out = _out_dir(cfg, out)
    policy = pol.load(checkpoint, expect_sizes=cfg.train.sizes)
    model = cfg.surrogate if plant == "surrogate" else cfg.nominal
    scfg = sim.SimConfig.from_dict({**cfg.sim.to_dict(), "plant": model.to_dict()})
    res = sim.rollout(policy, scfg, model=cfg.nominal)
    res.log.meta.update({"plant": plant, "checkpoint": os.path.basename(checkpoint), "seed": cfg.seed})
    save_log(res.log, os.path.join(out, f"rollout_{plant}.csv"))
    _json({"outcome": res.outcome, "steps": res.steps, "time": res.time, "reason": res.reason,
           "max_torso_excursion": res.max_torso_excursion, "stats": res.stats.to_dict()},
          os.path.join(out, f"rollout_{plant}_stats.json"))
    if not quiet:
        print(f"{plant}: {res.outcome} after {res.steps} steps ({res.time:.2f} s) {res.reason}")
    return OK if res.outcome == sim.COMPLETED else FAILED


def cmd_refine(config_path, episodes=3, checkpoint=None, out=None, quiet=False):
    cfg = _load_config(config_path)
    out = _out_dir(cfg, out)
    p0 = pol.load(checkpoint, expect_sizes=cfg.train.sizes) if checkpoint else None
    rcfg = cfg.refine_config(initial_policy=p0, out_dir=out)
    records = rs.episodic_refine(episodes, rcfg, log=None if quiet else print)
    v = [r.violation for r in records]
    _json({"violations": v, "episodes": [r.to_dict() for r in records]}, os.path.join(out, "refine.json"))
    if episodes == 1:
        return OK if not records[0].fell else FAILED
    return OK if v[-1] < v[0] else FAILED


def cmd_verify(config_path, checkpoint, out=None, combined=True, quiet=False):
    cfg = _load_config(config_path)
    out = _out_dir(cfg, out)
    policy = pol.load(checkpoint, expect_sizes=cfg.train.sizes)
    vc = cfg.verify
    report = ver.certify(policy, cfg.specs, cfg.regions, cfg.nominal, vc.n_samples, vc.tol, cfg.seed)
    sweep = []
    if combined:
        spec = next(s for s in cfg.specs if s.name == vc.combined_spec)
        lyap = ver.output_lyapunov(vc.kp, vc.kd)
        setup = ver.combined_setup(spec, policy, lyap, cfg.regions[spec.region], cfg.nominal, vc.n_samples,
                                   cfg.seed, vc.alpha, vc.eta_radius, vc.n_pairs)
        first, checks = ver.sigma_sweep(setup)
        report.combined = first or checks[-1]
        sweep = [{"sigma": c.sigma, "c": c.c, "margin": c.margin, "passed": c.passed} for c in checks]
    d = report.to_dict()
    d["sigma_sweep"] = sweep
    _json(d, os.path.join(out, "certification.json"))
    if not quiet:
        print(report.summary())
    return OK if report.passed else FAILED


# ----------------------------------------------------------------------------
# export


def _polyline_svg(series, title, xlabel, ylabel, hlines=(), width=640, height=360):
    """A bare line plot; ``series`` is a list of (x, y) arrays."""
    xs = np.concatenate([s[0] for s in series])
    ys = np.concatenate([s[1] for s in series] + [np.asarray(hlines, dtype=float)])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    m = 50

    def px(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def py(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">{ylabel}</text>',
           f'<rect x="{m}" y="{m}" width="{width - 2 * m}" height="{height - 2 * m}" fill="none" stroke="black"/>',
           f'<text x="{m}" y="{height - m + 15}" font-size="10">{x0:.3g}</text>',
           f'<text x="{width - m}" y="{height - m + 15}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{m - 4}" y="{height - m}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{m - 4}" y="{m + 10}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for h in hlines:
        out.append(f'<line x1="{m}" x2="{width - m}" y1="{py(h):.2f}" y2="{py(h):.2f}" '
                   f'stroke="red" stroke-dasharray="4 3"/>')
    for x, y in series:
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_series(log, bounds):
    """name -> (header, columns) of the exported time series."""
    torso = dyn.torso_angle(log.q)
    return {"phase_portrait": (("t", "z1", "z2"), (log.t, log.z[:, 0], log.z[:, 1])),
            "torso_angle": (("t", "torso", "lower", "upper"),
                            (log.t, torso, np.full_like(torso, bounds[0]), np.full_like(torso, bounds[1]))),
            "swing_foot_height": (("t", "p_z"), (log.t, log.p_z))}


def cmd_export(log_path, fmt="csv", out=None, bounds=(-math.pi / 10, 0.05), quiet=False):
    log = load_log(log_path)
    if len(log) < 2:
        raise LogFormatError("log has too few samples to export")
    out = out or os.path.join(os.environ.get(C.OUTPUT_ENV) or os.path.dirname(os.path.abspath(log_path)),
                              "export")
    os.makedirs(out, exist_ok=True)
    series = export_series(log, bounds)
    written = []
    for name, (header, cols) in series.items():
        path = os.path.join(out, f"{name}.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])
        written.append(path)
    if fmt == "svg-lines":
        segs = log.segments()
        plots = {
            "phase_portrait": ([(log.z[a:b, 0], log.z[a:b, 1]) for a, b in segs], "zero-dynamics phase",
                               "z1 [rad]", "z2 [kg m^2/s]", ()),
            "torso_angle": ([(log.t, dyn.torso_angle(log.q))], "torso angle", "t [s]", "torso [rad]", bounds),
            "swing_foot_height": ([(log.t, log.p_z)], "swing foot height", "t [s]", "p_z [m]", (0.0,)),
        }
        for name, (ser, title, xl, yl, hl) in plots.items():
            path = os.path.join(out, f"{name}.svg")
            with open(path, "w") as f:
                f.write(_polyline_svg(ser, title, xl, yl, hl))
            written.append(path)
    if not quiet:
        for p in written:
            print(p)
    return OK


def cmd_init_config(path, seed=0):
    C.default_config(seed).save(path)
    return OK


# ----------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="neural-gaits", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False):
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--out", help=f"output directory (else ${C.OUTPUT_ENV}, else the config's)")
        p.add_argument("--quiet", action="store_true")
        if ckpt:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("train", help="train a policy"))
    p = sub.add_parser("rollout", help="closed-loop rollout of a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--plant", choices=("nominal", "surrogate"), default="nominal")
    p = sub.add_parser("refine", help="episodic residual refinement on the surrogate plant")
    common(p)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--checkpoint", help="initial policy (trained from scratch when omitted)")
    p = sub.add_parser("verify", help="sampled certification of a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--no-combined", action="store_true", help="skip the combined-barrier check")
    p = sub.add_parser("export", help="time series and line plots from a rollout log")
    p.add_argument("log")
    p.add_argument("--format", choices=("csv", "svg-lines"), default="csv")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p = sub.add_parser("init-config", help="write the default run config")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return ERROR if e.code else OK
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.quiet)
        if args.command == "rollout":
            return cmd_rollout(args.config, args.checkpoint, args.plant, args.out, args.quiet)
        if args.command == "refine":
            if args.episodes < 1:
                raise ValueError("need at least one episode")
            return cmd_refine(args.config, args.episodes, args.checkpoint, args.out, args.quiet)
        if args.command == "verify":
            return cmd_verify(args.config, args.checkpoint, args.out, not args.no_combined, args.quiet)
        if args.command == "export":
            return cmd_export(args.log, args.format, args.out, quiet=args.quiet)
        if args.command == "init-config":
            return cmd_init_config(args.path, args.seed)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return ERROR
    except (OSError, ValueError, LogFormatError, ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ERROR
    return ERROR


if __name__ == "__main__":
    sys.exit(main())
