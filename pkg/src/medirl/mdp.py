"""Fixation MDP, soft value iteration and the maximum-entropy trajectory machinery.

Horizon conventions: soft value iteration and likelihoods count *decisions*
(a trajectory with ``h`` decisions visits ``h + 1`` states); visitation
frequencies count *visited states*, so ``expected_svf(..., horizon=1)`` is
the start distribution itself.

Discounting follows the trajectory distribution p(xi) ∝ exp(sum_t gamma^t r_t(s_t)).
The backup is the usual Q_t = r_t + gamma V_{t+1} with a soft maximum taken at
inverse temperature gamma^t, which makes the induced policy reproduce that
distribution exactly (for gamma = 1 it is the plain logsumexp backup).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .grid import ACTIONS, ActionLabel, GridSpec, PatchIndex, build_grid, center_patch, fixations_to_states

PATCH_TARGET = "patch-target"
SEVEN_MACRO = "seven-macro"


@dataclass(frozen=True, eq=False)
class FixationMdp:
    grid: GridSpec
    action_model: str
    next_state: np.ndarray  # (S, A) deterministic successor
    gamma: float = 0.98
    horizon: Optional[int] = None

    @property
    def num_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def num_actions(self) -> int:
        return self.next_state.shape[1]

    def successor_onehot(self) -> np.ndarray:
        """(S*A, S) matrix mapping a state-action flow onto next states."""
        S, A = self.next_state.shape
        out = np.zeros((S * A, S))
        out[np.arange(S * A), self.next_state.ravel()] = 1.0
        return out


def _macro_successor(grid: GridSpec, r: int, c: int, action: ActionLabel, center: PatchIndex) -> int:
    dr = int(np.sign(center.row - r))
    dc = int(np.sign(center.col - c))
    step = {
        ActionLabel.LEFT: (0, -1), ActionLabel.RIGHT: (0, 1),
        ActionLabel.UP: (-1, 0), ActionLabel.DOWN: (1, 0),
        ActionLabel.FOCUS_INWARD: (dr, dc), ActionLabel.FOCUS_OUTWARD: (-dr, -dc),
        ActionLabel.STAY: (0, 0),
    }[action]
    nr = min(max(r + step[0], 0), grid.n - 1)
    nc = min(max(c + step[1], 0), grid.m - 1)
    return nr * grid.m + nc


def build_mdp(grid: GridSpec, action_model: str = PATCH_TARGET, gamma: float = 0.98,
              horizon: Optional[int] = None) -> FixationMdp:
    if not 0 < gamma <= 1:
        raise ValidationError(f"discount must lie in (0, 1], got {gamma}")
    S = grid.num_states
    if action_model == PATCH_TARGET:
        nxt = np.tile(np.arange(S), (S, 1))
    elif action_model == SEVEN_MACRO:
        center = center_patch(grid)
        nxt = np.array([[_macro_successor(grid, s // grid.m, s % grid.m, a, center) for a in ACTIONS]
                        for s in range(S)])
    else:
        raise ValidationError(f"unknown action model {action_model!r}")
    return FixationMdp(grid, action_model, nxt, gamma, horizon)


def mdp_from_successors(next_state: np.ndarray, gamma: float = 0.98) -> FixationMdp:
    """Arbitrary deterministic MDP, mostly for tests."""
    next_state = np.asarray(next_state, dtype=int)
    S = next_state.shape[0]
    return FixationMdp(build_grid(1, S, 1, 1), "custom", next_state, gamma)


class SoftSolution(NamedTuple):
    V: np.ndarray       # (..., H+1, S), or (S,) when stationary
    Q: np.ndarray       # (..., H, S, A)
    policy: np.ndarray  # (..., H, S, A); rows sum to one


def _soft_max(q: np.ndarray, beta: float):
    bq = beta * q
    top = bq.max(axis=-1, keepdims=True)
    lse = top + np.log(np.exp(bq - top).sum(axis=-1, keepdims=True))
    return lse[..., 0] / beta, np.exp(bq - lse)


def soft_backup(next_state: np.ndarray, rewards: np.ndarray, gamma: float, t0: int = 0) -> SoftSolution:
    """Finite-horizon soft backup for (possibly batched) time-indexed rewards.

    ``rewards`` has shape (..., H+1, S): the reward collected in the state
    occupied at each of the H+1 time steps. ``t0`` offsets the absolute time
    used for the discount temperature."""
    rewards = np.asarray(rewards, dtype=float)
    H = rewards.shape[-2] - 1
    S, A = next_state.shape
    V = np.empty(rewards.shape)
    Q = np.empty(rewards.shape[:-2] + (H, S, A))
    pi = np.empty_like(Q)
    V[..., H, :] = rewards[..., H, :]
    for t in range(H - 1, -1, -1):
        q = rewards[..., t, :, None] + gamma * V[..., t + 1, :][..., next_state]
        V[..., t, :], pi[..., t, :, :] = _soft_max(q, gamma ** (t0 + t))
        Q[..., t, :, :] = q
    return SoftSolution(V, Q, pi)


def soft_value_iteration(mdp: FixationMdp, r: np.ndarray, horizon: Optional[int] = None, t0: int = 0,
                         tol: float = 1e-6, max_sweeps: int = 1000) -> SoftSolution:
    """Soft (logsumexp) value iteration.

    ``r`` is a per-state reward (S,) or a time-indexed reward (horizon+1, S).
    With ``horizon`` None (and no horizon on the MDP) the infinite-horizon
    fixed point is iterated to a sup-norm change below ``tol`` and the
    stationary (V, Q, policy) are returned."""
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValidationError("reward contains non-finite values")
    if horizon is None:
        horizon = mdp.horizon
    S = mdp.num_states
    if horizon is None:
        if r.shape != (S,):
            raise ValidationError("infinite-horizon iteration needs a stationary reward")
        if mdp.gamma >= 1:
            raise ValidationError("infinite-horizon iteration needs gamma < 1")
        V = np.zeros(S)
        for _ in range(max_sweeps):
            q = r[:, None] + mdp.gamma * V[mdp.next_state]
            V_new, pi = _soft_max(q, 1.0)
            if np.max(np.abs(V_new - V)) < tol:
                return SoftSolution(V_new, q, pi)
            V = V_new
        raise NumericalError(f"soft value iteration did not converge in {max_sweeps} sweeps")
    if horizon < 0:
        raise ValidationError("horizon must be nonnegative")
    if r.shape == (S,):
        r = np.broadcast_to(r, (horizon + 1, S))
    elif r.shape != (horizon + 1, S):
        raise ValidationError(f"reward shape {r.shape} does not match horizon {horizon} and {S} states")
    return soft_backup(mdp.next_state, r, mdp.gamma, t0)


def state_occupancy(mdp: FixationMdp, policy: np.ndarray, start_dist: np.ndarray, horizon: int,
                    onehot: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-step state distributions D_1..D_horizon, shape (..., horizon, S).

    ``policy`` is stationary (S, A) or time-indexed (..., >=horizon-1, S, A);
    a leading batch shape must match that of ``start_dist``."""
    start_dist = np.asarray(start_dist, dtype=float)
    S, A = mdp.next_state.shape
    if horizon < 1:
        raise ValidationError("visitation horizon must be at least 1")
    if np.any(start_dist < -1e-12) or not np.allclose(start_dist.sum(axis=-1), 1.0, atol=1e-9):
        raise ValidationError("start distribution must be nonnegative and sum to 1")
    policy = np.asarray(policy, dtype=float)
    stationary = policy.ndim == 2
    if not stationary and policy.shape[-3] < horizon - 1:
        raise ValidationError(f"policy covers {policy.shape[-3]} steps, need {horizon - 1}")
    if onehot is None:
        onehot = mdp.successor_onehot()
    D = np.empty(start_dist.shape[:-1] + (horizon, S))
    D[..., 0, :] = start_dist
    for t in range(horizon - 1):
        pi_t = policy if stationary else policy[..., t, :, :]
        flow = D[..., t, :, None] * pi_t
        D[..., t + 1, :] = flow.reshape(flow.shape[:-2] + (S * A,)) @ onehot
    return D


def expected_svf(mdp: FixationMdp, policy: np.ndarray, start_dist: np.ndarray, horizon: int) -> np.ndarray:
    """Expected state-visitation counts summed over ``horizon`` visited states."""
    return state_occupancy(mdp, policy, start_dist, horizon).sum(axis=-2)


@dataclass(frozen=True)
class Demonstrations:
    trajectories: tuple  # tuple of int arrays of flat state indices

    def __post_init__(self):
        if not self.trajectories:
            raise ValidationError("no demonstrations")
        object.__setattr__(self, "trajectories", tuple(np.asarray(t, dtype=int) for t in self.trajectories))
        if any(t.ndim != 1 or t.size == 0 for t in self.trajectories):
            raise ValidationError("each demonstration must be a nonempty state sequence")

    @classmethod
    def from_fixations(cls, grid: GridSpec, sequences) -> "Demonstrations":
        return cls(tuple(fixations_to_states(grid, seq.points) for seq in sequences))

    def check(self, S: int) -> None:
        for t in self.trajectories:
            if t.min() < 0 or t.max() >= S:
                raise ValidationError(f"demonstration state outside 0..{S - 1}")


def empirical_svf(demos: Demonstrations, S: int, horizon: int) -> np.ndarray:
    """Average per-state visit counts within the first ``horizon`` states of each trajectory."""
    demos.check(S)
    mu = np.zeros(S)
    for traj in demos.trajectories:
        mu += np.bincount(traj[:horizon], minlength=S)
    return mu / len(demos.trajectories)


def maxent_gradient(mu_demo: np.ndarray, mu_model: np.ndarray) -> np.ndarray:
    """Gradient of the negative log-likelihood with respect to per-state reward."""
    mu_demo = np.asarray(mu_demo, dtype=float)
    mu_model = np.asarray(mu_model, dtype=float)
    if mu_demo.shape != mu_model.shape:
        raise ValidationError(f"visitation shapes differ: {mu_demo.shape} vs {mu_model.shape}")
    return mu_model - mu_demo


def transition_probs(mdp: FixationMdp, policy_t: np.ndarray, s: int) -> np.ndarray:
    """P(next state | s) under one step of the policy."""
    return np.bincount(mdp.next_state[s], weights=policy_t[s], minlength=mdp.num_states)


def log_likelihood(demos: Demonstrations, r: np.ndarray, mdp: FixationMdp,
                   horizon: Optional[int] = None) -> float:
    """Mean over demonstrations of log p(trajectory | first state).

    Each demonstration contributes its first ``horizon`` decisions (all of
    them when ``horizon`` is None)."""
    demos.check(mdp.num_states)
    total = 0.0
    cache = {}
    for traj in demos.trajectories:
        h = len(traj) - 1 if horizon is None else min(horizon, len(traj) - 1)
        if h not in cache:
            cache[h] = soft_value_iteration(mdp, r, h).policy
        policy = cache[h]
        for t in range(h):
            p = transition_probs(mdp, policy[t], traj[t])[traj[t + 1]]
            if p <= 0:
                raise ValidationError(f"demonstrated transition {traj[t]}->{traj[t + 1]} is impossible")
            total += np.log(p)
    return total / len(demos.trajectories)


class TrajectoryDistribution(NamedTuple):
    actions: np.ndarray     # (N, length)
    states: np.ndarray      # (N, length+1)
    probs: np.ndarray       # (N,)
    visitation: np.ndarray  # (S,) expected visits over the length+1 states

    def state_sequence_probs(self) -> dict:
        out = {}
        for seq, p in zip(map(tuple, self.states), self.probs):
            out[seq] = out.get(seq, 0.0) + p
        return out


MAX_ENUMERATION = 2 ** 20


@functools.lru_cache(maxsize=8)
def _action_rows(A: int, length: int) -> np.ndarray:
    """Every action sequence, one contiguous row per step: shape (length, A**length)."""
    rows = np.indices((A,) * length).reshape(length, -1) if length else np.zeros((0, 1), dtype=int)
    rows.flags.writeable = False
    return rows


@functools.lru_cache(maxsize=16)
def _prefix_levels(successors: bytes, S: int, A: int, start: int, length: int) -> tuple:
    """Level t holds the state reached by each of the A**t action prefixes,
    in the same order as ``_action_rows``."""
    next_state = np.frombuffer(successors, dtype=np.int64).reshape(S, A)
    levels = [np.array([start], dtype=np.int64)]
    for _ in range(length):
        levels.append(next_state[levels[-1]].ravel())
    for lv in levels:
        lv.flags.writeable = False
    return tuple(levels)


@functools.lru_cache(maxsize=4)
def _state_rows(successors: bytes, S: int, A: int, start: int, length: int) -> np.ndarray:
    """States visited along every action sequence, shape (length + 1, A**length)."""
    levels = _prefix_levels(successors, S, A, start, length)
    rows = np.stack([np.repeat(lv, A ** (length - t)) for t, lv in enumerate(levels)])
    rows.flags.writeable = False
    return rows


def enumerate_trajectories(mdp: FixationMdp, r: np.ndarray, start: int, length: int) -> TrajectoryDistribution:
    """Exact trajectory distribution by brute force, p ∝ exp(sum_t gamma^t r_t(s_t)).

    ``r`` is (S,) or time-indexed (length+1, S). Test oracle only; the path
    table is cached so that many rewards on one MDP stay cheap."""
    S, A = mdp.next_state.shape
    if A ** length > MAX_ENUMERATION:
        raise ValidationError(f"{A}^{length} trajectories exceed the enumeration guard")
    if not 0 <= start < S:
        raise ValidationError(f"start state {start} out of range")
    r = np.asarray(r, dtype=float)
    if r.ndim == 1:
        r = np.broadcast_to(r, (length + 1, S))
    successors = np.ascontiguousarray(mdp.next_state, dtype=np.int64).tobytes()
    key = (successors, S, A, int(start), int(length))
    levels = _prefix_levels(*key)
    # returns accumulate prefix by prefix, so shared prefixes are scored once
    ret = r[0][levels[0]].copy()
    for t in range(1, length + 1):
        ret = (ret[:, None] + mdp.gamma ** t * r[t][levels[t]].reshape(-1, A)).ravel()
    w = np.exp(ret - ret.max())
    probs = w / w.sum()
    visitation = np.zeros(S)
    for t, lv in enumerate(levels):
        visitation += np.bincount(lv, weights=probs.reshape(lv.size, -1).sum(axis=1), minlength=S)
    return TrajectoryDistribution(_action_rows(A, length).T, _state_rows(*key).T, probs, visitation)
