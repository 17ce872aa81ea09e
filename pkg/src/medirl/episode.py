"""Stepping a foveated state through a scene, one fixation at a time.

Shared by training (replaying demonstrations) and by scanpath generation.
The features for a decision are built *before* the chosen fixation is
applied, so a reward never sees the location it is about to score.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .features import (DEPTH_GAIN, MAX_SPEED, FeatureToggles, SceneSequence, static_patch_features)
from .fovea import (SIGMA_MAX, FoveatedState, advance_frame, gaussian_blur, init_state, make_fovea_mask,
                    peripheral_sigma, update_within_frame)
from .grid import FixationPoint, GridSpec, patch_center, pool_patches, unflatten


@dataclass(frozen=True)
class StateConfig:
    toggles: FeatureToggles = field(default_factory=FeatureToggles)
    mask_mode: str = "patch"
    mask_radius: float = 12.0
    sigma_max: float = SIGMA_MAX
    distance: str = "center"
    depth_gain: float = DEPTH_GAIN
    max_speed: float = MAX_SPEED


class SceneStepper:
    """Foveated state of one viewer moving through ``scene``."""

    def __init__(self, scene: SceneSequence, grid: GridSpec, cfg: StateConfig = StateConfig()):
        if scene.frame_shape != (grid.frame_h, grid.frame_w):
            raise ValidationError(f"scene frames {scene.frame_shape} do not match grid "
                                  f"{grid.frame_h}x{grid.frame_w}")
        self.scene = scene
        self.grid = grid
        self.cfg = cfg
        self.state: Optional[FoveatedState] = None
        self.frame = -1
        self.current = -1
        self._static = {}

    def _mask(self, s: int):
        return make_fovea_mask(self.grid, unflatten(self.grid, s), self.cfg.mask_mode, self.cfg.mask_radius)

    def start(self, s: int, frame: int = 0, point: Optional[FixationPoint] = None) -> None:
        """Initial low-resolution view from fixation ``s``, then that fixation itself."""
        if point is None:
            x, y = patch_center(self.grid, unflatten(self.grid, s))
            point = FixationPoint(x, y, 0.0, frame)
        H = self.scene.frames[frame].X
        sigma = peripheral_sigma(point, (self.grid.frame_h, self.grid.frame_w), self.cfg.sigma_max,
                                 self.cfg.distance)
        self.state = update_within_frame(init_state(gaussian_blur(H, sigma)), H, self._mask(s), self.grid)
        self.frame = frame
        self.current = s

    def fixate(self, s: int, frame: int) -> None:
        if self.state is None:
            raise ValidationError("stepper not started")
        if frame < self.frame:
            raise ValidationError("frames must be visited in order")
        H = self.scene.frames[frame].X
        if frame == self.frame:
            self.state = update_within_frame(self.state, H, self._mask(s), self.grid)
        else:
            self.state = advance_frame(self.state, H, self._mask(s), self.grid)
        self.frame = frame
        self.current = s

    def static(self, frame: int) -> np.ndarray:
        if frame not in self._static:
            f = self.scene.frames[frame]
            self._static[frame] = static_patch_features(
                f, self.grid, self.scene.task, self.scene.speeds[frame], self.cfg.toggles,
                self.cfg.depth_gain, self.cfg.max_speed)
        return self._static[frame]

    def features(self, frame: int) -> np.ndarray:
        """Patch features (S, d) for choosing the next fixation, which lands in ``frame``."""
        parts = []
        if self.cfg.toggles.X:
            parts.append(pool_patches(self.grid, self.state.O).reshape(self.grid.num_states, -1))
        parts.append(self.static(frame))
        return np.concatenate(parts, axis=1)


def replay_features(scene: SceneSequence, states: Sequence[int], frames: Sequence[int], grid: GridSpec,
                    cfg: StateConfig = StateConfig(), first_point: Optional[FixationPoint] = None) -> np.ndarray:
    """Decision features along a demonstrated fixation sequence, shape (N-1, S, d)."""
    states = np.asarray(states, dtype=int)
    frames = np.asarray(frames, dtype=int)
    if states.shape != frames.shape or states.size < 2:
        raise ValidationError("need at least two fixations with matching frame indices")
    stepper = SceneStepper(scene, grid, cfg)
    stepper.start(int(states[0]), int(frames[0]), first_point)
    out = []
    for s, f in zip(states[1:], frames[1:]):
        out.append(stepper.features(int(f)))
        stepper.fixate(int(s), int(f))
    return np.stack(out)


def feature_dim(scene: SceneSequence, cfg: StateConfig) -> int:
    f = scene.frames[0]
    t = cfg.toggles
    d = 0
    if t.X:
        d += f.X.shape[2]
    if t.Y:
        d += f.Y.shape[2]
    d += int(t.G) + 2 * int(t.M) + 3 * int(t.Q) + int(t.v)
    return d
