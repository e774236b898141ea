"""Train, roll out, certify, refine and export in one go.

    python3 scripts/run_pipeline.py [--config run.json] [--out runs/demo] [--episodes 3]

Each stage is the matching ``neural-gaits`` subcommand; exit codes are
collected and printed at the end.
"""
import argparse
import os
import sys

from neural_gaits import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--episodes", type=int, default=3)
    ap.add_argument("--skip-refine", action="store_true")
    a = ap.parse_args(argv)
    base = ["--out", a.out] + (["--config", a.config] if a.config else [])
    ckpt = os.path.join(a.out, "policy.json")
    stages = [("train", ["train"] + base),
              ("rollout", ["rollout", "--checkpoint", ckpt] + base),
              ("verify", ["verify", "--checkpoint", ckpt] + base),
              ("export", ["export", os.path.join(a.out, "rollout_nominal.csv"), "--format", "svg-lines"])]
    if not a.skip_refine:
        stages.append(("refine", ["refine", "--checkpoint", ckpt, "--episodes", str(a.episodes),
                                  "--out", os.path.join(a.out, "refine")]
                       + (["--config", a.config] if a.config else [])))
    codes = {}
    for name, args in stages:
        print(f"== {name}", flush=True)
        codes[name] = cli.main(args)
        if name == "train" and codes[name] == cli.ERROR:
            break
    for name, code in codes.items():
        print(f"{name:8s} exit {code}")
    return max(codes.values())


if __name__ == "__main__":
    sys.exit(main())
