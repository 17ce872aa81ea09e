"""Scanpath generation and attention maps.

A rollout walks a viewer through a scene: at every step the reward map is
recomputed from the current foveated state, the soft policy row at the
current patch is taken, recently visited patches in the same frame are
damped (inhibition of return), and the next patch is sampled or taken as
the argmax.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .episode import SceneStepper, StateConfig
from .errors import ValidationError
from .features import SceneSequence
from .fovea import gaussian_blur
from .ften import atomic_write_bytes, atomic_write_text, write_tensor
from .grid import FixationPoint, GridSpec, PatchIndex, center_patch, flatten, patch_center, unflatten
from .mdp import FixationMdp, soft_value_iteration, state_occupancy
from .rewardnet import RewardNetParams, forward

SIGMA_SMOOTH = 12.0
SAMPLE, ARGMAX = "sample", "argmax"


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValidationError(f"saliency map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0:
            raise ValidationError("saliency map must be finite and nonnegative")
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValidationError(f"saliency map sums to {v.sum()}, expected 1")
        object.__setattr__(self, "values", v)

    @classmethod
    def normalized(cls, x: np.ndarray) -> "SaliencyMap":
        x = np.clip(np.asarray(x, dtype=float), 0.0, None)
        total = x.sum()
        if not total > 0:
            raise ValidationError("cannot normalize an all-zero map")
        return cls(x / total)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class IoRConfig:
    decay: float = 0.1
    memory: Optional[int] = None  # most recent fixations in the current frame; None means all

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValidationError(f"IoR decay must lie in [0, 1], got {self.decay}")
        if self.memory is not None and self.memory < 0:
            raise ValidationError("IoR memory must be nonnegative")


@dataclass(frozen=True)
class ScanStep:
    frame: int
    step: int
    patch: PatchIndex
    prob: float


@dataclass(frozen=True)
class Scanpath:
    steps: tuple[ScanStep, ...]
    seed: int
    mode: str

    def flat_states(self, grid: GridSpec) -> np.ndarray:
        return np.array([flatten(grid, s.patch) for s in self.steps])

    def to_points(self, grid: GridSpec, duration: float = 0.0) -> tuple[FixationPoint, ...]:
        out = []
        for s in self.steps:
            x, y = patch_center(grid, s.patch)
            out.append(FixationPoint(float(x), float(y), duration, s.frame))
        return tuple(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_index", "step", "row", "col", "prob"])
        for s in self.steps:
            w.writerow([s.frame, s.step, s.patch.row, s.patch.col, repr(s.prob)])
        return buf.getvalue()


def reward_map(params: RewardNetParams, phi: np.ndarray) -> np.ndarray:
    """Eval-mode reward per patch for features ``phi`` (S, d)."""
    if phi.shape[1] != params.config.input_dim:
        raise ValidationError(f"network expects {params.config.input_dim} features, got {phi.shape[1]}")
    r, _ = forward(params, phi, train_mode=False)
    return r


def apply_ior(probs: np.ndarray, visited: Sequence[int], cfg: IoRConfig) -> np.ndarray:
    """Damp recently visited states and renormalize."""
    out = np.array(probs, dtype=float)
    recent = list(visited) if cfg.memory is None else list(visited)[-cfg.memory:] if cfg.memory else []
    for s in set(recent):
        out[s] *= cfg.decay
    total = out.sum()
    if total <= 0:  # everything suppressed: fall back to the raw policy
        return np.asarray(probs, dtype=float)
    return out / total


def _check_counts(K_per_frame, T: int) -> np.ndarray:
    K = np.broadcast_to(np.asarray(K_per_frame, dtype=int), (T,)).copy()
    if np.any(K < 0) or K.sum() == 0:
        raise ValidationError("fixation counts must be nonnegative and not all zero")
    return K


def _remaining(K: np.ndarray, f: int, k: int) -> int:
    """Decisions left after the current one, counted to the end of the clip."""
    return int(K[f] - k - 1 + K[f + 1:].sum())


def rollout(params: RewardNetParams, scene: SceneSequence, grid: GridSpec, mdp: FixationMdp,
            K_per_frame: Union[int, Sequence[int]], ior: IoRConfig = IoRConfig(), seed: int = 0,
            mode: str = SAMPLE, state_cfg: StateConfig = StateConfig(),
            start: Union[int, np.ndarray, None] = None) -> Scanpath:
    """Generate a fixation sequence over ``scene``.

    ``start`` is a state index, a start distribution over states, or None for
    the center patch. The start fixation is the first of frame 0's
    ``K_per_frame`` fixations; every later fixation is one policy decision."""
    if mode not in (SAMPLE, ARGMAX):
        raise ValidationError(f"unknown rollout mode {mode!r}")
    if mdp.num_states != grid.num_states:
        raise ValidationError("MDP and grid disagree on the number of states")
    T = scene.num_frames
    K = _check_counts(K_per_frame, T)
    rng = np.random.default_rng(seed)
    S = grid.num_states

    if start is None:
        start = flatten(grid, center_patch(grid))
    if np.ndim(start) == 0:
        s, p0 = int(start), 1.0
        if not 0 <= s < S:
            raise ValidationError(f"start state {s} out of range")
    else:
        dist = np.asarray(start, dtype=float)
        if dist.shape != (S,) or dist.min() < 0 or abs(dist.sum() - 1) > 1e-9:
            raise ValidationError("start distribution must be a probability vector over states")
        s = int(rng.choice(S, p=dist)) if mode == SAMPLE else int(np.argmax(dist))
        p0 = float(dist[s])

    first = int(np.flatnonzero(K)[0])
    stepper = SceneStepper(scene, grid, state_cfg)
    stepper.start(s, first)
    steps = [ScanStep(first, 0, unflatten(grid, s), p0)]
    visited = [s]
    u = 0
    for f in range(first, T):
        if f != first:
            visited = []
        for k in range(1 if f == first else 0, K[f]):
            r = reward_map(params, stepper.features(f))
            H = _remaining(K, f, k) + 1
            pi = soft_value_iteration(mdp, r, horizon=H, t0=u).policy[0, s]
            probs = np.bincount(mdp.next_state[s], weights=pi, minlength=S)
            probs = apply_ior(probs, visited, ior)
            if mode == SAMPLE:
                nxt = int(rng.choice(S, p=probs))
            else:
                nxt = int(np.argmax(probs))
            steps.append(ScanStep(f, k, unflatten(grid, nxt), float(probs[nxt])))
            stepper.fixate(nxt, f)
            visited.append(nxt)
            s = nxt
            u += 1
    return Scanpath(tuple(steps), seed, mode)


def paint_patches(grid: GridSpec, patch_probs: np.ndarray) -> np.ndarray:
    """Spread each patch's mass uniformly over its pixels, (h, w)."""
    p = np.asarray(patch_probs, dtype=float).reshape(grid.n, grid.m)
    dens = p / grid.patch_areas
    return np.repeat(np.repeat(dens, grid.row_heights, axis=0), grid.col_widths, axis=1)


def smooth_map(x: np.ndarray, sigma: float) -> SaliencyMap:
    if sigma > 0:
        x = gaussian_blur(x, sigma)
    return SaliencyMap.normalized(x)


def occupancy_map(grid: GridSpec, mdp: FixationMdp, r: np.ndarray, start_dist: np.ndarray, horizon: int,
                  t0: int = 0, sigma: float = SIGMA_SMOOTH, include_start: bool = False) -> SaliencyMap:
    """Expected fixation density of the next ``horizon`` decisions under reward ``r``."""
    if horizon < 1 and not include_start:
        raise ValidationError("horizon must be at least 1")
    start_dist = np.asarray(start_dist, dtype=float)
    if horizon >= 1:
        pi = soft_value_iteration(mdp, r, horizon=horizon, t0=t0).policy
        D = state_occupancy(mdp, pi, start_dist, horizon + 1)
        rows = D if include_start else D[1:]
    else:
        rows = start_dist[None]
    return smooth_map(paint_patches(grid, rows.mean(axis=0)), sigma)


def policy_saliency(params: RewardNetParams, scene: SceneSequence, grid: GridSpec, mdp: FixationMdp,
                    K_per_frame: Union[int, Sequence[int]] = 3, ior: IoRConfig = IoRConfig(),
                    state_cfg: StateConfig = StateConfig(), start: Optional[int] = None,
                    sigma: float = SIGMA_SMOOTH) -> list:
    """One predicted attention map per frame.

    The reward for a frame is computed from the foveated state reached when
    the frame begins; the map is the expected fixation density of that frame's
    decisions from the current patch. The state then advances along the
    deterministic (argmax) scanpath."""
    T = scene.num_frames
    K = _check_counts(K_per_frame, T)
    path = rollout(params, scene, grid, mdp, K, ior, 0, ARGMAX, state_cfg, start)
    states = path.flat_states(grid)
    frames = [st.frame for st in path.steps]
    stepper = SceneStepper(scene, grid, state_cfg)
    stepper.start(int(states[0]), frames[0])
    S = grid.num_states
    maps, i = [], 1
    for f in range(T):
        cur = int(states[i - 1])
        delta = np.zeros(S)
        delta[cur] = 1.0
        first = f == frames[0]
        n_dec = K[f] - 1 if first else K[f]
        if n_dec == 0 and not first:
            n_dec = 1  # no fixations planned in this frame: predict one step ahead anyway
        r = reward_map(params, stepper.features(f))
        maps.append(occupancy_map(grid, mdp, r, delta, n_dec, t0=i - 1, sigma=sigma, include_start=first))
        for _ in range(K[f] - 1 if first else K[f]):
            stepper.fixate(int(states[i]), frames[i])
            i += 1
    return maps


def fixations_to_map(fixations: Sequence[FixationPoint], frame: tuple[int, int],
                     sigma: float = SIGMA_SMOOTH) -> SaliencyMap:
    """Ground-truth attention map from human fixations (duration weighted when
    every duration is positive)."""
    if not fixations:
        raise ValidationError("no fixations to aggregate")
    h, w = frame
    durations = np.array([p.duration for p in fixations], dtype=float)
    weights = durations if np.all(durations > 0) else np.ones(len(fixations))
    x = np.zeros((h, w))
    for p, wt in zip(fixations, weights):
        row = min(max(int(np.floor(p.y)), 0), h - 1)
        col = min(max(int(np.floor(p.x)), 0), w - 1)
        x[row, col] += wt
    return smooth_map(x, sigma)


def write_scanpath(path, sp: Scanpath) -> None:
    atomic_write_text(path, sp.to_csv())


def write_saliency(path, smap: SaliencyMap) -> None:
    write_tensor(path, smap.values, dtype_code=2)


def to_pgm(smap: SaliencyMap) -> bytes:
    """Binary 8-bit PGM, scaled so the maximum maps to 255."""
    v = smap.values
    top = v.max()
    img = np.zeros(v.shape, dtype=np.uint8) if top <= 0 else np.round(255 * v / top).astype(np.uint8)
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    return header + img.tobytes()


def write_pgm(path, smap: SaliencyMap) -> None:
    atomic_write_bytes(path, to_pgm(smap))
