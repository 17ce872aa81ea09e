"""Synthetic experts for reward-recovery experiments.

A planted linear reward over the fused patch features favours the lead
vehicle and, once it brakes, its brake light. Depth-amplified appearance
(channel 1 of Z) adds a bonus that no other cue carries, and lane markings
get a small one. Expert scanpaths are sampled from the MaxEnt
policy that this reward induces, with the same foveated-state dynamics the
learner sees.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .episode import StateConfig
from .errors import ValidationError
from .features import FeatureToggles, SceneSequence, SynthParams, feature_names, synth_scene
from .grid import FixationSequence, GridSpec, build_grid, flatten, PatchIndex
from .mdp import PATCH_TARGET, build_mdp
from .rewardnet import NetConfig, RewardNetParams
from .scanpath import IoRConfig, SAMPLE, rollout

# weights by feature name; anything unlisted gets zero
PLANTED_WEIGHTS = {"M": 4.0, "U": 12.0, "Z1": 5.0, "G": 1.0}
FIXATION_MS = 250.0


def default_grid() -> GridSpec:
    """6x8 patches of 12x17 pixels."""
    return build_grid(72, 136, 12, 17)


@dataclass(frozen=True)
class ExpertConfig:
    scenes: int = 40
    frames: int = 6
    demos_per_scene: int = 5
    fixations_per_frame: int = 3
    gamma: float = 0.98
    action_model: str = PATCH_TARGET
    weights: dict = field(default_factory=lambda: dict(PLANTED_WEIGHTS))
    synth: SynthParams = field(default_factory=SynthParams)

    def validate(self):
        if self.scenes < 1:
            raise ValidationError("need at least one scene")
        if self.frames < 1 or self.demos_per_scene < 1 or self.fixations_per_frame < 1:
            raise ValidationError("frame, demo and fixation counts must be positive")
        self.synth.validate()


def planted_params(d_x: int, d_y: int, weights: Optional[dict] = None,
                   toggles: FeatureToggles = FeatureToggles()) -> RewardNetParams:
    """A linear reward net (no hidden layers) over the full feature vector."""
    weights = PLANTED_WEIGHTS if weights is None else weights
    names = feature_names(toggles, d_x, d_y)
    unknown = set(weights) - set(names)
    if unknown:
        raise ValidationError(f"planted weights name unknown features {sorted(unknown)}")
    w = np.array([float(weights.get(n, 0.0)) for n in names])
    cfg = NetConfig(len(names), (), normalization=False)
    return RewardNetParams(cfg, {"w_out": w, "b_out": np.zeros(())}, {})


def start_distribution(grid: GridSpec) -> np.ndarray:
    """Uniform over the (up to) 2x2 patches around the frame center."""
    S = grid.num_states
    p = np.zeros(S)
    rows = sorted({(grid.n - 1) // 2, grid.n // 2})
    cols = sorted({(grid.m - 1) // 2, grid.m // 2})
    for r in rows:
        for c in cols:
            p[flatten(grid, PatchIndex(r, c))] = 1.0
    return p / p.sum()


def sample_experts(scene: SceneSequence, grid: GridSpec, params: RewardNetParams, cfg: ExpertConfig,
                   seed: int, state_cfg: StateConfig = StateConfig()) -> tuple:
    mdp = build_mdp(grid, cfg.action_model, cfg.gamma)
    start = start_distribution(grid)
    ss = np.random.SeedSequence(seed)
    out = []
    for j, child in enumerate(ss.spawn(cfg.demos_per_scene)):
        path = rollout(params, scene, grid, mdp, cfg.fixations_per_frame, IoRConfig(decay=1.0),
                       int(child.generate_state(1)[0]), SAMPLE, state_cfg, start)
        out.append(FixationSequence(path.to_points(grid, FIXATION_MS), f"expert{j:02d}", scene.video_id))
    return tuple(out)


def make_dataset(seed: int, cfg: ExpertConfig = ExpertConfig(), grid: Optional[GridSpec] = None,
                 state_cfg: StateConfig = StateConfig()) -> tuple:
    """Scenes with sampled expert fixations, plus the planted reward params."""
    cfg.validate()
    grid = default_grid() if grid is None else grid
    params = planted_params(cfg.synth.d_x, cfg.synth.d_y, cfg.weights)
    ss = np.random.SeedSequence(seed)
    scenes = []
    for i, child in enumerate(ss.spawn(cfg.scenes)):
        scene_seed, demo_seed = (int(v) for v in child.generate_state(2))
        scene = synth_scene(scene_seed, grid, cfg.frames, cfg.synth, f"synth-{seed}-{i:03d}")
        demos = sample_experts(scene, grid, params, cfg, demo_seed, state_cfg)
        scenes.append(replace(scene, ground_truth_fixations=demos))
    return scenes, params
