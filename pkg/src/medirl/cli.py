"""``medirl`` command line: synth | train | eval | rollout.

Every command loads and validates its whole configuration and inputs before
writing anything. Failures print one line, ``error: <category>: <message>``,
to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import TOGGLE_NAMES, RunConfig
from .episode import StateConfig, feature_dim, replay_features
from .errors import DataError, MedirlError, ValidationError
from .features import FeatureToggles, SceneSequence, feature_names, load_scene, save_scene
from .ften import atomic_write_bytes, atomic_write_text, write_tensor
from .grid import FixationSequence, GridSpec, fixations_to_states, flatten, center_patch
from .mdp import build_mdp
from .metrics import (MetricReport, evaluate_frame, filter_irrelevant, important_frames, pool_negatives)
from .rewardnet import load_checkpoint, save_checkpoint
from .scanpath import (SaliencyMap, fixations_to_map, policy_saliency, reward_map, rollout, to_pgm,
                       write_saliency)
from .synthetic import ExpertConfig, make_dataset
from .training import build_examples, train

log = logging.getLogger("medirl")

EXIT_CODES = {"config": 2, "validation": 3, "data": 4, "format": 5, "numeric": 6, "io": 7}


# --- dataset discovery --------------------------------------------------------

def find_manifests(data) -> list:
    """Manifest paths from a dataset.json, a directory, or a single manifest."""
    path = Path(data)
    if path.is_dir() and (path / "dataset.json").exists():
        path = path / "dataset.json"
    if path.is_file() and path.name == "dataset.json":
        try:
            doc = json.loads(path.read_text())
            refs = doc["scenes"]
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: malformed dataset index ({exc})") from exc
        return [path.parent / r for r in refs]
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(path.glob("**/manifest.json"))
        if found:
            return found
        raise DataError(f"{path}: no manifest.json found")
    raise DataError(f"{path}: dataset not found")


def load_scenes(data, grid: GridSpec) -> list:
    if data is None:
        raise DataError("no dataset given (use --data or the 'data' config key)")
    scenes = []
    for m in find_manifests(data):
        scene = load_scene(m)
        if scene.frame_shape != (grid.frame_h, grid.frame_w):
            raise ValidationError(f"{m}: frames are {scene.frame_shape[0]}x{scene.frame_shape[1]} but the grid "
                                  f"expects {grid.frame_h}x{grid.frame_w}")
        scenes.append(scene)
    return scenes


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"{out}: output directory is not writable ({exc.strerror})") from exc
    return out


def _frame_maps(scene: SceneSequence, sigma: float) -> list:
    """Human attention map per frame, None where nobody fixated."""
    by_frame = {}
    for seq in scene.ground_truth_fixations or ():
        for p in seq.points:
            by_frame.setdefault(p.frame_index, []).append(p)
    return [fixations_to_map(by_frame[t], scene.frame_shape, sigma) if t in by_frame else None
            for t in range(scene.num_frames)]


# --- synth ----------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> Path:
    grid = cfg.grid.build()
    s = cfg.synth
    ecfg = ExpertConfig(scenes=s.scenes, frames=s.frames, demos_per_scene=s.demos_per_scene,
                        fixations_per_frame=s.fixations_per_frame, gamma=cfg.train.gamma,
                        action_model=cfg.train.action_model, weights=dict(s.weights), synth=s.synth_params())
    ecfg.validate()
    state_cfg = StateConfig()
    scenes, planted = make_dataset(cfg.seed, ecfg, grid, state_cfg)
    out = _prepare_out(cfg.out)
    refs = []
    for scene in scenes:
        d = out / "scenes" / scene.video_id
        d.mkdir(parents=True, exist_ok=True)
        save_scene(scene, d)
        demo = scene.ground_truth_fixations[0]
        phi = replay_features(scene, fixations_to_states(grid, demo.points),
                              [p.frame_index for p in demo.points], grid, state_cfg, demo.points[0])
        r = reward_map(planted, phi.reshape(-1, phi.shape[-1]))
        write_tensor(d / "planted_reward.ften", r.reshape(phi.shape[0], grid.n, grid.m), dtype_code=2)
        refs.append(f"scenes/{scene.video_id}/manifest.json")
    save_checkpoint(out / "planted", planted, extra={"features": feature_names(FeatureToggles(), s.synth_params().d_x,
                                                                                s.synth_params().d_y),
                                                     "weights": dict(s.weights)})
    index = {"scenes": refs, "seed": cfg.seed, "grid": asdict(cfg.grid), "planted": "planted",
             "fixations_per_frame": s.fixations_per_frame, "version": __version__}
    atomic_write_text(out / "dataset.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    settings = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "data", "checkpoint")}
    atomic_write_text(out / "config.json", json.dumps(settings, indent=2, sort_keys=True) + "\n")
    return out


# --- train ----------------------------------------------------------------------

def apply_gates(scenes: list, cfg: RunConfig):
    """Cut scenes to important-frame windows and drop demonstrations dominated by
    irrelevant objects. Returns (sequences, counts)."""
    g = cfg.gates
    counts = {"scenes": len(scenes), "demos": 0, "demos_irrelevant": 0, "scenes_without_windows": 0,
              "windows": 0, "sequences": 0}
    out = []
    for scene in scenes:
        demos = list(scene.ground_truth_fixations or ())
        counts["demos"] += len(demos)
        if g.filter_irrelevant:
            masks = [f.irrelevant if f.irrelevant is not None else np.zeros(f.shape) for f in scene.frames]
            kept = [d for d in demos if filter_irrelevant(d, masks, g.max_irrelevant)]
            counts["demos_irrelevant"] += len(demos) - len(kept)
            demos = kept
        if not demos:
            continue
        if g.important_frames:
            maps = _frame_maps(replace(scene, ground_truth_fixations=tuple(demos)), cfg.eval.sigma_smooth)
            if scene.num_frames < g.window:
                windows = []
            else:
                # frames nobody looked at get a flat map and may not sit inside a window
                flat = SaliencyMap(np.full(scene.frame_shape, 1.0 / np.prod(scene.frame_shape)))
                windows = [w for w in important_frames([m or flat for m in maps], g.kld_threshold, g.window)
                           if all(maps[t] is not None for t in w)]
        else:
            windows = [tuple(range(scene.num_frames))]
        if not windows:
            counts["scenes_without_windows"] += 1
            continue
        for w in windows:
            counts["windows"] += 1
            lo = w[0]
            sub = []
            for d in demos:
                pts = tuple(replace(p, frame_index=p.frame_index - lo) for p in d.points if p.frame_index in w)
                if len(pts) >= 2:
                    sub.append(FixationSequence(pts, d.driver_id, d.video_id))
            if not sub:
                continue
            suffix = "" if len(w) == scene.num_frames else f"@{lo}"
            out.append(SceneSequence(tuple(scene.frames[t] for t in w), scene.task,
                                     tuple(scene.speeds[t] for t in w), tuple(sub), scene.video_id + suffix))
            counts["sequences"] += len(sub)
    return out, counts


def _mean_fixations_per_frame(scenes) -> int:
    per_frame = [len([p for p in d.points if p.frame_index == t])
                 for s in scenes for d in s.ground_truth_fixations for t in {p.frame_index for p in d.points}]
    return max(int(round(float(np.mean(per_frame)))), 1) if per_frame else 1


def cmd_train(cfg: RunConfig) -> Path:
    grid = cfg.grid.build()
    tcfg = cfg.train_config()
    scenes = load_scenes(cfg.data, grid)
    gated, counts = apply_gates(scenes, cfg)
    if not gated:
        raise DataError("no training sequences left after gating (" +
                        ", ".join(f"{k}={v}" for k, v in counts.items()) + ")")
    examples = build_examples(gated, grid, tcfg.state, tcfg.frames_per_sequence)
    d = examples[0].phi.shape[-1]
    if tcfg.epochs == 0:
        log.info("zero epochs: writing the initial parameters")
    params, history = train(gated, grid, tcfg, examples=examples)
    out = _prepare_out(cfg.out)
    K = _mean_fixations_per_frame(gated)
    sample = scenes[0].frames[0]
    meta = {"grid": asdict(cfg.grid), "toggles_off": list(cfg.toggles_off), "state": asdict(cfg.state),
            "gamma": tcfg.gamma, "action_model": tcfg.action_model, "fixations_per_frame": K,
            "features": feature_names(tcfg.state.toggles, sample.X.shape[2], sample.Y.shape[2])}
    save_checkpoint(out / "checkpoint", params, history.optimizer, tcfg.epochs, cfg.seed, meta)
    atomic_write_text(out / "history.csv", history.to_csv(wall_time=cfg.train.wall_time))
    report = {"gates": counts, "examples": len(examples), "feature_dim": d, "epochs": tcfg.epochs,
              "final_nll": history.records[-1].nll if history.records else None}
    atomic_write_text(out / "train_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    if cfg.figures and history.records:
        from .plotting import training_curve
        training_curve(history, out / "figures" / "training_curve.png")
    return out


# --- eval / rollout -------------------------------------------------------------------

def _load_model(cfg: RunConfig, grid: GridSpec, scenes: list):
    """Checkpoint plus the state configuration it was trained with, checked against the data."""
    ckpt = cfg.checkpoint
    if ckpt is None:
        raise DataError("no checkpoint given (use --checkpoint or the 'checkpoint' config key)")
    params, _, meta = load_checkpoint(ckpt)
    if "grid" in meta and meta["grid"] != asdict(cfg.grid):
        raise ValidationError(f"checkpoint was trained on grid {meta['grid']} but the config has {asdict(cfg.grid)}")
    toggles = FeatureToggles().without(*meta.get("toggles_off", []))
    state = meta.get("state", {})
    state_cfg = StateConfig(toggles, state.get("mask_mode", "patch"), state.get("mask_radius", 12.0),
                            state.get("sigma_max", 64.0), state.get("distance", "center"))
    for scene in scenes:
        d = feature_dim(scene, state_cfg)
        if d != params.config.input_dim:
            raise ValidationError(f"scene {scene.video_id!r} yields {d} features but the checkpoint expects "
                                  f"{params.config.input_dim}")
    mdp = build_mdp(grid, meta.get("action_model", cfg.train.action_model), meta.get("gamma", cfg.train.gamma))
    K = cfg.eval.fixations_per_frame or int(meta.get("fixations_per_frame", 3))
    return params, state_cfg, mdp, K


def cmd_eval(cfg: RunConfig) -> Path:
    grid = cfg.grid.build()
    scenes = [s for s in load_scenes(cfg.data, grid) if s.ground_truth_fixations]
    if not scenes:
        raise DataError("no evaluation scenes with fixations")
    params, state_cfg, mdp, K = _load_model(cfg, grid, scenes)
    e = cfg.eval
    start = flatten(grid, center_patch(grid))
    by_video = {s.video_id: [p for d in s.ground_truth_fixations for p in d.points] for s in scenes}
    report = MetricReport(seed=cfg.seed, threshold=e.threshold)
    panels = []
    for i, scene in enumerate(scenes):
        preds = policy_saliency(params, scene, grid, mdp, K, cfg.ior_config(), state_cfg, start, e.sigma_smooth)
        truth = _frame_maps(scene, e.sigma_smooth)
        for t, gt in enumerate(truth):
            if gt is None:
                continue
            pos = [p for d in scene.ground_truth_fixations for p in d.points if p.frame_index == t]
            if len(by_video) > 1:
                pool, exclude = by_video, scene.video_id
            else:  # single clip: borrow from its other frames
                pool = {str(f): [p for p in by_video[scene.video_id] if p.frame_index == f]
                        for f in range(scene.num_frames)}
                exclude = str(t)
            neg_seed = int(np.random.SeedSequence([cfg.seed, i, t]).generate_state(1)[0])
            neg = pool_negatives(pool, exclude, e.negatives_factor * len(pos), neg_seed)
            report.frames.append(evaluate_frame(preds[t], gt, pos, neg, scene.video_id, t, e.threshold))
        panels.append((scene, preds, truth))
    out = _prepare_out(cfg.out)
    atomic_write_text(out / "metrics.csv", report.to_csv())
    atomic_write_text(out / "metrics.json", report.to_json())
    for scene, preds, _ in panels:
        for t, m in enumerate(preds):
            write_saliency(out / "maps" / scene.video_id / f"frame{t:03d}.ften", m)
    if cfg.figures:
        from .plotting import metric_bars, saliency_strip
        metric_bars(report.aggregate(), out / "figures" / "metrics.png", "held-out frames")
        for scene, preds, truth in panels[:4]:
            fallback = SaliencyMap(np.full(scene.frame_shape, 1.0 / np.prod(scene.frame_shape)))
            saliency_strip([f.X[:, :, 0] for f in scene.frames], preds, [g or fallback for g in truth],
                           out / "figures" / f"saliency_{scene.video_id}.png", scene.video_id)
    return out


def cmd_rollout(cfg: RunConfig) -> Path:
    grid = cfg.grid.build()
    scenes = load_scenes(cfg.data, grid)
    if not scenes:
        raise DataError("no scenes to roll out")
    params, state_cfg, mdp, K = _load_model(cfg, grid, scenes)
    ior = cfg.ior_config()
    start = flatten(grid, center_patch(grid))
    results = []
    for i, scene in enumerate(scenes):
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        path = rollout(params, scene, grid, mdp, K, ior, seed, cfg.rollout.mode, state_cfg, start)
        maps = policy_saliency(params, scene, grid, mdp, K, ior, state_cfg, start, cfg.eval.sigma_smooth)
        results.append((scene, path, maps))
    out = _prepare_out(cfg.out)
    for scene, path, maps in results:
        atomic_write_text(out / "scanpaths" / f"{scene.video_id}.csv", path.to_csv())
        for t, m in enumerate(maps):
            base = out / "saliency" / scene.video_id / f"frame{t:03d}"
            write_saliency(base.with_suffix(".ften"), m)
            if cfg.rollout.pgm:
                atomic_write_bytes(base.with_suffix(".pgm"), to_pgm(m))
    if cfg.figures:
        from .plotting import scanpath_plot
        for scene, path, _ in results[:4]:
            scanpath_plot(scene.frames[0].X[:, :, 0], path.to_points(grid), out / "figures" /
                          f"scanpath_{scene.video_id}.png", f"{scene.video_id} ({path.mode})")
    return out


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout}


# --- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medirl", description="Driver attention from demonstrations via "
                                                           "maximum-entropy deep inverse RL.")
    p.add_argument("--version", action="version", version=f"medirl {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset directory, dataset.json or manifest.json")
    p.add_argument("--checkpoint", help="checkpoint directory (eval, rollout)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--scenes", type=int, help="number of synthetic scenes (synth)")
    p.add_argument("--frames", type=int, help="frames per synthetic scene (synth)")
    p.add_argument("--mode", choices=("sample", "argmax"), help="rollout mode")
    p.add_argument("--toggle-off", action="append", default=[], metavar="GROUP",
                   help=f"disable a feature group ({'|'.join(TOGGLE_NAMES)}); repeatable or comma-separated")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Optional[list] = None) -> Path:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    toggles = [t.strip() for item in args.toggle_off for t in item.split(",") if t.strip()]
    cfg = cfg.override(seed=args.seed, out=args.out, data=args.data, checkpoint=args.checkpoint,
                       epochs=args.epochs, scenes=args.scenes, frames=args.frames, mode=args.mode,
                       toggle_off=toggles, no_figures=args.no_figures)
    return COMMANDS[args.command](cfg)


def main(argv: Optional[list] = None) -> int:
    try:
        out = run(argv)
    except MedirlError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
