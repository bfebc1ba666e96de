#!/usr/bin/env python3
"""Contrast hybrid force tracking with force-blind position tracking.

Sweeps force setpoints under the hybrid law on the flat compliant
fixture, then sweeps depth biases under pure position tracking, and
writes both curves to CSV (and optionally one PNG). The position sweep
shows why a few millimeters of trajectory bias turns into tens of
newtons against a 2000 N/m surface.

    python scripts/force_tracking_study.py --out study --png
"""
import argparse
import os

import numpy as np

from forcepeel.control import (
    ControlGains,
    HybridParams,
    press_to_contact,
    track_hybrid,
    track_position,
)
from forcepeel.sim import CompliantPlane, SimState
from forcepeel.transforms import Pose


def fresh_state(height=0.002):
    return SimState(tool_pose=Pose([0.0, 0.0, height]), model=CompliantPlane())


def hybrid_steady_force(setpoint, seconds=2.0):
    gains = ControlGains()
    state, _, _ = press_to_contact(fresh_state(), [0.0, 0.0, -setpoint], gains)
    t_step = gains.tick_dt * gains.ticks_per_step
    n = int(round(seconds / t_step))
    x0 = state.tool_pose.position[0]
    poses = [Pose([x0 + 0.02 * t_step * (i + 1), 0.0, 0.0]) for i in range(n)]
    forces = np.tile([0.0, 0.0, -setpoint], (n, 1))
    _, ticks = track_hybrid(state, HybridParams(np.array([1.0, 0.0, 0.0]),
                                                forces, poses), gains)
    t0 = ticks[0].time
    late = [np.linalg.norm(t.wrench.force) for t in ticks if t.time - t0 >= 0.5]
    return float(np.mean(late))


def position_steady_force(depth_bias, seconds=3.0):
    gains = ControlGains()
    n = int(round(seconds / (gains.tick_dt * gains.ticks_per_step)))
    targets = [Pose([0.0, 0.0, -depth_bias])] * n
    _, ticks = track_position(fresh_state(), targets, gains)
    t0 = ticks[0].time
    late = [np.linalg.norm(t.wrench.force) for t in ticks if t.time - t0 >= 2.0]
    return float(np.mean(late))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="force_study", help="output directory")
    ap.add_argument("--png", action="store_true", help="also render a figure")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    setpoints = np.arange(3.0, 15.1, 2.0)
    held = [hybrid_steady_force(s) for s in setpoints]
    biases_mm = np.arange(2.0, 21.0, 2.0)
    blind = [position_steady_force(1e-3 * b) for b in biases_mm]

    with open(os.path.join(args.out, "hybrid_setpoints.csv"), "w") as fh:
        fh.write("setpoint_n,steady_force_n\n")
        for s, f in zip(setpoints, held):
            fh.write(f"{s},{f}\n")
            print(f"hybrid   setpoint {s:5.1f} N -> steady {f:6.2f} N")
    with open(os.path.join(args.out, "position_bias.csv"), "w") as fh:
        fh.write("depth_bias_mm,steady_force_n\n")
        for b, f in zip(biases_mm, blind):
            fh.write(f"{b},{f}\n")
            print(f"position bias {b:5.1f} mm -> steady {f:6.2f} N")

    if args.png:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax1.plot(setpoints, held, "o-")
        ax1.plot(setpoints, setpoints, "k:", label="ideal")
        ax1.set_xlabel("setpoint [N]"), ax1.set_ylabel("steady force [N]")
        ax1.set_title("hybrid tracking"), ax1.legend()
        ax2.plot(biases_mm, blind, "s-", color="tab:red")
        ax2.set_xlabel("trajectory depth bias [mm]")
        ax2.set_ylabel("steady force [N]")
        ax2.set_title("position-only tracking")
        fig.tight_layout()
        path = os.path.join(args.out, "force_tracking_study.png")
        fig.savefig(path, dpi=150)
        print(f"figure written to {path}")


if __name__ == "__main__":
    main()
