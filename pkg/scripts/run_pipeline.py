#!/usr/bin/env python3
"""Run the whole pipeline into one workspace directory.

Synthesizes demonstrations, calibrates the sensor from the recorded
free-motion log, preprocesses into training chunks, trains the policy,
and rolls out both the trained policy and the scripted baseline.

    python scripts/run_pipeline.py --out runs/full --seed 0
    python scripts/run_pipeline.py --out runs/smoke --config configs/smoke.yaml
"""
import argparse
import os
import sys

from forcepeel.cli import main as cli


def run(argv):
    code = cli(argv)
    if code != 0:
        print(f"step {argv[0]!r} failed with exit code {code}", file=sys.stderr)
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="workspace directory")
    ap.add_argument("--config", default=None, help="YAML config for every step")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--episodes", type=int, default=5, help="rollout episodes per mode")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    common = ["--config", args.config] if args.config else []
    seeded = common + (["--seed", str(args.seed)] if args.seed is not None else [])
    raw = os.path.join(args.out, "raw")
    calib = os.path.join(args.out, "calibration.txt")
    ds = os.path.join(args.out, "dataset")
    policy = os.path.join(args.out, "policy.hyil")

    run(["gen-demos", "--out", raw] + seeded)
    run(["calibrate", "--log", os.path.join(raw, "calib_log.jsonl"), "--out", calib])
    run(["preprocess", "--raw", raw, "--calib", calib, "--out", ds] + common)
    run(["train", "--dataset", os.path.join(ds, "manifest.json"),
         "--out", policy] + seeded)
    for mode, flags in (("policy", ["--policy", policy]), ("scripted", ["--scripted"])):
        run_dir = os.path.join(args.out, f"run_{mode}")
        run(["rollout", "--episodes", str(args.episodes), "--out", run_dir]
            + flags + seeded)
        run(["eval", "--run", run_dir])
        run(["plot-forces", "--run", run_dir, "--episode", "0",
             "--out", os.path.join(run_dir, "forces_ep000.csv"),
             "--png", os.path.join(run_dir, "forces_ep000.png")])
    print(f"workspace complete under {args.out}")


if __name__ == "__main__":
    main()
