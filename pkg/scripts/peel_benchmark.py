#!/usr/bin/env python3
"""Benchmark the scripted expert over randomized peel episodes.

Runs closed-loop strokes on freshly randomized vegetable poses and
prints per-episode metrics plus the aggregate success counts. Useful as
a sanity floor: a trained policy should approach these numbers.

    python scripts/peel_benchmark.py --episodes 20 --seed 1
"""
import argparse

import numpy as np

from forcepeel.expert import randomized_zucchini, run_scripted_episode
from forcepeel.sim import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target-force", type=float, default=6.0)
    args = ap.parse_args()

    header = ("ep", "strip_m", "mean_f_n", "peak_f_n", "peeled", "damaged", "ok")
    print(("{:>4} {:>8} {:>9} {:>9} {:>7} {:>8} {:>4}").format(*header))
    motion, success, strips, means = 0, 0, [], []
    for ep in range(args.episodes):
        rng = np.random.default_rng([args.seed, ep])
        model = randomized_zucchini(rng)
        final_model, ticks = run_scripted_episode(
            model, seed=int(rng.integers(2 ** 31 - 1)),
            target_force=args.target_force)
        forces = np.array([t.wrench.force for t in ticks])
        m = evaluate(final_model, forces)
        motion += bool(m["motion_correct"])
        success += bool(m["success_10cm"])
        strips.append(m["max_continuous_strip"])
        means.append(m["mean_contact_force"])
        print(f"{ep:>4} {m['max_continuous_strip']:>8.3f} "
              f"{m['mean_contact_force']:>9.2f} {m['peak_force']:>9.2f} "
              f"{m['peeled_cells']:>7} {m['damaged_cells']:>8} "
              f"{'yes' if m['success_10cm'] else 'no':>4}")

    n = args.episodes
    print(f"\nmotion_correct {motion}/{n}   success_10cm {success}/{n}   "
          f"median strip {np.median(strips):.3f} m   "
          f"mean contact force {np.mean(means):.2f} N")


if __name__ == "__main__":
    main()
