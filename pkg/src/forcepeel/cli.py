"""Command-line pipeline: calibrate, preprocess, gen-demos, train, rollout,
eval, plot-forces.

Exit convention: 1 for parse/IO failures, 2 for validation failures, 3 for
numeric failures. Every run directory carries a reproducibility stamp
(seed, config hash) and no wall-clock timestamps, so rerunning a command
with the same seed rewrites byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from .calibration import (
    ToolInertia,
    compensate,
    estimate_tool_gravity,
    gravity_wrench,
    stationary_mask,
)
from .cloud import crop_workspace, load_pc3, save_pc3, voxelize_to_count
from .config import PipelineConfig, config_dict, config_hash, load_config
from .control import run_episode
from .dataset import (
    DatasetManifest,
    DemoRecord,
    SegmentEntry,
    calib_samples_from_log,
    list_raw_segments,
    load_calib_log,
    load_calibration,
    load_manifest,
    load_raw_segment,
    read_jsonl,
    save_calib_log,
    save_calibration,
    save_manifest,
    save_records,
    write_jsonl,
    write_raw_segment,
)
from .errors import NumericError, ParseError, ValidationError
from .expert import (
    action_row,
    make_policy_planner,
    randomized_zucchini,
    run_scripted_episode,
    scripted_expert,
    stroke_start_pose,
)
from .policy import TrainItem, compute_norm_stats, load_params, save_params, train
from .sim import SimState, ZucchiniModel, evaluate
from .transforms import Frame, TimedStream, Wrench, quat_canonical, resample

METRIC_COLUMNS = (
    "episode", "status", "motion_correct", "success_10cm",
    "max_continuous_strip", "mean_contact_force", "peak_force",
    "contact_fraction", "peeled_cells", "damaged_cells",
)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _resolve_seed(args, cfg: PipelineConfig) -> int:
    """--seed beats FORCEMIMIC_SEED beats the config default."""
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("FORCEMIMIC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"FORCEMIMIC_SEED must be an integer, got {env!r}")
    return cfg.seed


def _camera_tuple(cfg: PipelineConfig):
    cam = cfg.camera
    return cam.intrinsics(), cam.width, cam.height, cam.pose()


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))


def format_metrics_csv(rows) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def _write_text(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _print_aggregate(rows) -> None:
    n = len(rows)
    mc = sum(1 for r in rows if r["motion_correct"])
    ok = sum(1 for r in rows if r["success_10cm"])
    print(f"episodes {n} motion_correct {mc}/{n} success_10cm {ok}/{n}")


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    times, quats, wrenches = load_calib_log(args.log)
    keep = stationary_mask(times, wrenches[:, :3])
    samples = calib_samples_from_log(quats[keep], wrenches[keep])
    tool = estimate_tool_gravity(samples, gravity=cfg.gravity)
    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    save_calibration(args.out, tool, samples=len(samples), created=created)
    print(f"samples {len(samples)} of {len(times)}")
    print(f"mass_kg {tool.mass!r}")
    print(f"residual_rms {tool.residual_rms!r}")
    return 0


# ---------------------------------------------------------------------------
# gen-demos: synthesize a raw collection session in the simulator
# ---------------------------------------------------------------------------

def _uniform_grid(t0: float, t1: float, rate: float) -> np.ndarray:
    n = int(np.floor((t1 - t0) * rate)) + 1
    return t0 + np.arange(n) / rate


def _synthesize_calib_log(path, cfg: PipelineConfig, rng) -> int:
    d = cfg.demo
    tool_truth = _demo_tool(cfg)
    times, quats, rows = [], [], []
    n_dwell = max(2, int(round(d.calib_dwell * d.calib_rate)))
    for block in range(d.calib_samples):
        v = rng.normal(size=4)
        q = quat_canonical(v / np.linalg.norm(v))
        base = gravity_wrench(q, tool_truth).as_array()
        for j in range(n_dwell):
            times.append(block * d.calib_dwell + j / d.calib_rate)
            quats.append(q)
            rows.append(base + d.calib_noise * rng.standard_normal(6))
    save_calib_log(path, times, quats, rows)
    return len(times)


def _demo_tool(cfg: PipelineConfig) -> ToolInertia:
    d = cfg.demo
    return ToolInertia(mass=d.mass, com=np.asarray(d.com),
                       force_bias=np.asarray(d.force_bias),
                       torque_bias=np.asarray(d.torque_bias),
                       residual_rms=0.0, gravity=cfg.gravity)


def cmd_gen_demos(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    d = cfg.demo
    os.makedirs(args.out, exist_ok=True)

    calib_rows = _synthesize_calib_log(
        os.path.join(args.out, "calib_log.jsonl"), cfg,
        np.random.default_rng([seed, 999]))

    rng = np.random.default_rng([seed, 7])
    model = randomized_zucchini(rng, **dataclasses.asdict(cfg.sim))
    demos, _ = scripted_expert(
        model, target_force=d.target_force, strokes=d.strokes,
        seed=int(rng.integers(2 ** 31 - 1)), cfg=cfg.expert, gains=cfg.control,
        render_stride=d.render_stride, raw_clouds=True,
        camera=_camera_tuple(cfg))
    tool_truth = _demo_tool(cfg)

    for k, demo in enumerate(demos):
        seg_dir = os.path.join(args.out, f"seg_{k:03d}")
        os.makedirs(os.path.join(seg_dir, "clouds"), exist_ok=True)
        noise_rng = np.random.default_rng([seed, 1000 + k])
        t0, t1 = float(demo.times[0]), float(demo.times[-1])
        recorded = TimedStream(demo.times, np.hstack([demo.poses, demo.wrenches]),
                               1.0 / (demo.times[1] - demo.times[0]))

        pose_times = _uniform_grid(t0, t1, d.pose_rate)
        pose_rows = resample(
            TimedStream(demo.times, demo.poses, recorded.nominal_rate),
            pose_times, "slerp")

        wrench_times = _uniform_grid(t0, t1, d.wrench_rate)
        interaction = resample(
            TimedStream(demo.times, demo.wrenches, recorded.nominal_rate),
            wrench_times, "linear")
        orient = resample(
            TimedStream(demo.times, demo.poses, recorded.nominal_rate),
            wrench_times, "slerp")[:, 3:]
        raw = np.stack([
            w + gravity_wrench(q, tool_truth).as_array()
            for w, q in zip(interaction, orient)
        ]) + d.wrench_noise * noise_rng.standard_normal((len(wrench_times), 6))

        frame_idx = sorted(demo.clouds)
        rels = []
        for i in frame_idx:
            rel = f"clouds/f_{i:05d}.pc3"
            save_pc3(os.path.join(seg_dir, rel), demo.clouds[i])
            rels.append(rel)
        write_raw_segment(seg_dir, wrench_times, raw, d.wrench_rate,
                          pose_times, pose_rows, d.pose_rate,
                          demo.times[frame_idx], rels)

    stamp = {"command": "gen-demos", "seed": seed,
             "config_hash": config_hash(cfg), "segments": len(demos),
             "calib_rows": calib_rows, "version": 1}
    _write_text(os.path.join(args.out, "run.json"),
                json.dumps(stamp, sort_keys=True, indent=2) + "\n")
    print(f"segments {len(demos)} calib_rows {calib_rows} out {args.out}")
    return 0


# ---------------------------------------------------------------------------
# preprocess: align streams, compensate, crop + voxelize, chunk
# ---------------------------------------------------------------------------

def _process_segment(seg_dir, out_dir, seg_id, seg_index, tool, cfg: PipelineConfig):
    raw = load_raw_segment(seg_dir)
    target = raw.frame_times
    raw6 = resample(raw.wrench, target, "linear")
    pose7 = resample(raw.poses, target, "slerp")

    comp = np.stack([
        compensate(Wrench(r[:3], r[3:], Frame.SENSOR), p[3:], tool).as_array()
        for r, p in zip(raw6, pose7)
    ])

    seg_out = os.path.join(out_dir, seg_id)
    os.makedirs(os.path.join(seg_out, "clouds"), exist_ok=True)
    bounds = cfg.cloud.bounds()
    exclusions = cfg.cloud.exclusion_boxes()
    records, cloud_rels = [], []
    for i, path in enumerate(raw.cloud_paths):
        cloud = crop_workspace(load_pc3(path), bounds, exclusions)
        cloud = voxelize_to_count(cloud, cfg.cloud.size,
                                  seed=cfg.cloud.seed + 9973 * seg_index + i)
        rel = f"{seg_id}/clouds/c_{i:05d}.pc3"
        save_pc3(os.path.join(out_dir, rel), cloud)
        cloud_rels.append(rel)
        records.append(DemoRecord(
            timestamp=float(target[i]), pose=pose7[i], raw_wrench=raw6[i],
            raw_frame="sensor", wrench=comp[i], cloud=rel))
    save_records(os.path.join(seg_out, "records.jsonl"), records)

    horizon, advance = cfg.policy.horizon, cfg.train.advance
    hist = cfg.policy.history
    rows = np.stack([action_row(p, w) for p, w in zip(pose7, comp)])
    chunks = []
    for i in range(len(records)):
        if i + advance + horizon > len(records):
            continue
        past = [pose7[max(i - k, 0)].tolist() for k in range(hist - 1, -1, -1)]
        chunks.append({
            "start": i,
            "cloud": cloud_rels[i],
            "history": past,
            "actions": rows[i + advance:i + advance + horizon].tolist(),
        })
    write_jsonl(os.path.join(seg_out, "chunks.jsonl"), chunks)
    entry = SegmentEntry(id=seg_id, records=f"{seg_id}/records.jsonl",
                         frames=len(records), chunks=f"{seg_id}/chunks.jsonl")
    actions = np.stack([c["actions"] for c in chunks]) if chunks else None
    return entry, actions


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    tool = load_calibration(args.calib)
    seg_dirs = list_raw_segments(args.raw)
    if not seg_dirs:
        raise ValidationError(f"no seg_* directories under {args.raw}")
    os.makedirs(args.out, exist_ok=True)

    entries, all_actions, skipped = [], [], 0
    for k, seg_dir in enumerate(seg_dirs):
        seg_id = f"seg_{k:03d}"
        try:
            entry, actions = _process_segment(seg_dir, args.out, seg_id, k, tool, cfg)
        except (ParseError, ValidationError) as e:
            print(f"warning: skipping {seg_dir}: {e}", file=sys.stderr)
            skipped += 1
            continue
        entries.append(entry)
        if actions is not None:
            all_actions.append(actions)
    if not entries:
        print(f"error: all {skipped} segments skipped", file=sys.stderr)
        return 1

    stats_rel = None
    if all_actions:
        mean, std = compute_norm_stats(np.concatenate(all_actions))
        stats_rel = "stats.json"
        _write_text(os.path.join(args.out, stats_rel),
                    json.dumps({"mean": mean.tolist(), "std": std.tolist()},
                               sort_keys=True, indent=2) + "\n")

    manifest = DatasetManifest(
        segments=entries,
        calibration=os.path.relpath(os.path.abspath(args.calib), os.path.abspath(args.out)),
        stats=stats_rel,
        config=config_dict(cfg))
    save_manifest(os.path.join(args.out, "manifest.json"), manifest)
    n_chunks = int(sum(a.shape[0] for a in all_actions)) if all_actions else 0
    n_records = int(sum(e.frames for e in entries))
    print(f"segments {len(entries)} skipped {skipped} records {n_records} chunks {n_chunks}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    manifest = load_manifest(args.dataset)
    base = os.path.dirname(os.path.abspath(args.dataset))

    items = []
    for entry in manifest.segments:
        if entry.chunks is None:
            continue
        for row in read_jsonl(os.path.join(base, entry.chunks)):
            items.append(TrainItem(
                history=np.asarray(row["history"], dtype=float),
                actions=np.asarray(row["actions"], dtype=float),
                cloud_path=os.path.join(base, row["cloud"])))
    if not items:
        raise ValidationError(f"{args.dataset}: no chunks to train on")
    shape = items[0].actions.shape
    want = (cfg.policy.horizon, cfg.policy.action_dim)
    if shape != want:
        raise ValidationError(f"dataset chunks are {shape}, policy expects {want}")

    tcfg = dataclasses.replace(cfg.train, seed=seed)
    params, curve = train(items, cfg.policy, tcfg)
    save_params(args.out, params)
    curve_path = args.curve or os.path.splitext(args.out)[0] + "_loss.csv"
    lines = ["epoch,loss"] + [f"{i + 1},{float(v)!r}" for i, v in enumerate(curve)]
    _write_text(curve_path, "\n".join(lines) + "\n")
    print(f"chunks {len(items)} epochs {len(curve)}")
    print(f"first_loss {float(curve[0])!r}")
    print(f"final_loss {float(curve[-1])!r}")
    return 0


# ---------------------------------------------------------------------------
# rollout / eval / plot-forces
# ---------------------------------------------------------------------------

def _episode_forces(tick_rows) -> np.ndarray:
    if not tick_rows:
        return np.zeros((0, 3))
    return np.array([row["wrench"][:3] for row in tick_rows])


def _save_episode(ep_dir, status: str, model: ZucchiniModel, tick_rows) -> None:
    os.makedirs(ep_dir, exist_ok=True)
    write_jsonl(os.path.join(ep_dir, "ticks.jsonl"), tick_rows)
    doc = {
        "status": status,
        "radius": model.radius,
        "length": model.length,
        "n_angular": model.n_angular,
        "n_axial": model.n_axial,
        "cells": model.cells.ravel().tolist(),
    }
    _write_text(os.path.join(ep_dir, "episode.json"),
                json.dumps(doc, sort_keys=True) + "\n")


def cmd_rollout(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    if args.episodes < 1:
        raise ValidationError(f"--episodes must be >= 1, got {args.episodes}")
    params = load_params(args.policy) if args.policy else None
    os.makedirs(args.out, exist_ok=True)

    rows = []
    for ep in range(args.episodes):
        rng = np.random.default_rng([seed, ep])
        model = randomized_zucchini(rng, **dataclasses.asdict(cfg.sim))
        if params is None:
            final_model, ticks = run_scripted_episode(
                model, seed=int(rng.integers(2 ** 31 - 1)),
                target_force=cfg.demo.target_force,
                cfg=cfg.expert, gains=cfg.control)
            status = "completed"
        else:
            planner = make_policy_planner(
                params, seed=int(rng.integers(2 ** 31 - 1)),
                camera=_camera_tuple(cfg), bounds=cfg.cloud.bounds())
            theta = float(rng.uniform(0.0, 2.0 * np.pi))
            state = SimState(tool_pose=stroke_start_pose(model, theta, cfg.expert),
                             model=model)
            e = cfg.episode
            result = run_episode(state, planner, cfg.control,
                                 cycles=e.cycles,
                                 executed_horizon=e.executed_horizon,
                                 threshold=e.threshold,
                                 consecutive=e.consecutive)
            final_model, ticks, status = result.final_state.model, result.ticks, result.status

        tick_rows = [t.as_dict() for t in ticks]
        _save_episode(os.path.join(args.out, f"ep_{ep:03d}"), status, final_model, tick_rows)
        metrics = evaluate(final_model, _episode_forces(tick_rows),
                           cfg.episode.contact_threshold)
        rows.append({"episode": ep, "status": status, **metrics})

    stamp = {"command": "rollout", "mode": "scripted" if params is None else "policy",
             "policy": args.policy, "episodes": args.episodes, "seed": seed,
             "contact_threshold": cfg.episode.contact_threshold,
             "config_hash": config_hash(cfg), "version": 1}
    _write_text(os.path.join(args.out, "run.json"),
                json.dumps(stamp, sort_keys=True, indent=2) + "\n")
    _write_text(os.path.join(args.out, "metrics.csv"), format_metrics_csv(rows))
    _print_aggregate(rows)
    return 0


def _load_run(run_dir) -> dict:
    try:
        with open(os.path.join(run_dir, "run.json")) as fh:
            return json.load(fh)
    except OSError as e:
        raise ParseError(f"{run_dir} is not a run directory: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{run_dir}/run.json: invalid JSON: {e}") from e


def _episode_dirs(run_dir):
    eps = sorted(n for n in os.listdir(run_dir)
                 if n.startswith("ep_") and os.path.isdir(os.path.join(run_dir, n)))
    if not eps:
        raise ValidationError(f"{run_dir}: no ep_* episode directories")
    return [os.path.join(run_dir, n) for n in eps]


def cmd_eval(args) -> int:
    stamp = _load_run(args.run)
    threshold = float(stamp.get("contact_threshold", 2.0))
    rows = []
    for ep, ep_dir in enumerate(_episode_dirs(args.run)):
        with open(os.path.join(ep_dir, "episode.json")) as fh:
            doc = json.load(fh)
        cells = np.array(doc["cells"], dtype=np.int8).reshape(
            doc["n_angular"], doc["n_axial"])
        model = ZucchiniModel(radius=doc["radius"], length=doc["length"],
                              n_angular=doc["n_angular"], n_axial=doc["n_axial"],
                              cells=cells)
        tick_rows = read_jsonl(os.path.join(ep_dir, "ticks.jsonl"))
        metrics = evaluate(model, _episode_forces(tick_rows), threshold)
        rows.append({"episode": ep, "status": doc["status"], **metrics})
    _write_text(os.path.join(args.run, "eval.csv"), format_metrics_csv(rows))
    _print_aggregate(rows)
    return 0


def cmd_plot_forces(args) -> int:
    stamp = _load_run(args.run)
    ep_dirs = _episode_dirs(args.run)
    if not 0 <= args.episode < len(ep_dirs):
        raise ValidationError(
            f"--episode {args.episode} out of range, run has {len(ep_dirs)} episodes")
    tick_rows = read_jsonl(os.path.join(ep_dirs[args.episode], "ticks.jsonl"))
    if not tick_rows:
        raise ValidationError(f"episode {args.episode} has no ticks")
    times = np.array([row["t"] for row in tick_rows])
    norms = np.linalg.norm(_episode_forces(tick_rows), axis=1)

    lines = ["time_s,force_norm_n"]
    lines += [f"{t!r},{n!r}" for t, n in zip(times.tolist(), norms.tolist())]
    _write_text(args.out, "\n".join(lines) + "\n")

    threshold = float(stamp.get("contact_threshold", 2.0))
    contact = norms[norms >= threshold]
    mean = float(contact.mean()) if contact.size else 0.0
    if args.png:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.plot(times, norms, lw=0.8)
        ax.axhline(threshold, color="gray", ls="--", lw=0.6)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("|F| [N]")
        ax.set_title(f"episode {args.episode}, contact mean {mean:.2f} N")
        fig.tight_layout()
        fig.savefig(args.png, dpi=120)
        plt.close(fig)
    print(f"rows {len(times)} contact_mean_n {mean!r}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forcepeel",
        description="Force-aware peeling pipeline: calibration, preprocessing, "
                    "demonstrations, policy training, and simulated rollouts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", default=None, help="YAML config overriding defaults")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="seed (default: FORCEMIMIC_SEED env, then config)")

    p = sub.add_parser("calibrate", help="fit tool gravity model from a quasi-static log")
    common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-demos", help="synthesize a raw collection session in simulation")
    common(p, seed=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("preprocess", help="align, compensate, voxelize, and chunk a raw session")
    common(p)
    p.add_argument("--raw", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the diffusion policy on a processed dataset")
    common(p, seed=True)
    p.add_argument("--dataset", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True, help="output policy parameters file")
    p.add_argument("--curve", default=None, help="loss curve CSV (default: alongside --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="run closed-loop episodes on randomized models")
    common(p, seed=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--policy", default=None, help="trained parameters file")
    group.add_argument("--scripted", action="store_true", help="use the scripted expert")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="recompute metrics from a rollout directory")
    common(p)
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-forces", help="export time-vs-force-norm CSV for one episode")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--png", default=None, help="also render a PNG plot")
    p.set_defaults(func=cmd_plot_forces)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
