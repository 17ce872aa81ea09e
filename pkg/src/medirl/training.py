"""Maximum-entropy deep IRL training loop and held-out diagnostics.

Each demonstration is one viewer's fixation sequence over a clip. At every
decision the reward map is recomputed from the current foveated state, so a
demonstration of N fixations yields a time-indexed reward rho_1..rho_{N-1}.
A single finite-horizon soft backup over that reward gives the policy, the
forward pass gives the per-step state distributions D_u, and

    d NLL / d rho_u = gamma^u (D_u - onehot(s_u))

which is fed to the network's backward pass.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .episode import StateConfig, replay_features
from .errors import DataError, NumericalError, ValidationError
from .features import SceneSequence
from .grid import GridSpec, fixations_to_states
from .mdp import PATCH_TARGET, FixationMdp, build_mdp, soft_backup, state_occupancy
from .rewardnet import (AdamState, LrSchedule, NetConfig, RewardNetParams, adam_step, backward, forward,
                        grad_norm, init_params, lr_at_epoch, update_running_stats)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 36
    batch_size: int = 20
    frames_per_sequence: int = 6  # longer demonstrations are cut into chunks of this many frames
    seed: int = 0
    gamma: float = 0.98
    action_model: str = PATCH_TARGET
    hidden_widths: tuple[int, ...] = (52, 34, 20, 20)
    normalization: bool = True
    schedule: LrSchedule = field(default_factory=LrSchedule)
    state: StateConfig = field(default_factory=StateConfig)
    min_visits: int = 0  # states seen fewer times in the data are left out of the gradient

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.frames_per_sequence < 1:
            raise ValidationError("epochs must be >= 0 and batch sizes positive")


@dataclass
class Example:
    """One demonstration with its precomputed decision features."""
    scene: int
    states: np.ndarray  # (N,)
    phi: np.ndarray     # (N-1, S, d)


@dataclass
class EpochRecord:
    epoch: int
    nll: float
    grad_norm: float
    lr: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    optimizer: Optional[AdamState] = None  # state after the last step, for checkpoints

    @property
    def nll(self) -> np.ndarray:
        return np.array([r.nll for r in self.records])

    def to_csv(self, wall_time: bool = False) -> str:
        """``epoch,nll,grad_norm,lr,seconds``; seconds are blank unless ``wall_time``
        (wall-clock timings would make otherwise identical runs differ)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "nll", "grad_norm", "lr", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.nll), repr(r.grad_norm), repr(r.lr),
                        f"{r.seconds:.3f}" if wall_time else ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["nll"]), float(r["grad_norm"]), float(r["lr"]),
                                float(r["seconds"]) if r["seconds"] else float("nan")) for r in rows])


def build_examples(scenes: Sequence[SceneSequence], grid: GridSpec, cfg: StateConfig,
                   frames_per_sequence: int = 6) -> list:
    """Replay every demonstration, cut into chunks spanning ``frames_per_sequence`` frames."""
    examples = []
    for i, scene in enumerate(scenes):
        if not scene.ground_truth_fixations:
            raise DataError(f"scene {scene.video_id!r} has no demonstrations")
        for seq in scene.ground_truth_fixations:
            chunks = {}
            for p in seq.points:
                chunks.setdefault(p.frame_index // frames_per_sequence, []).append(p)
            for _, points in sorted(chunks.items()):
                if len(points) < 2:
                    continue
                states = fixations_to_states(grid, points)
                frames = [p.frame_index for p in points]
                phi = replay_features(scene, states, frames, grid, cfg, first_point=points[0])
                examples.append(Example(i, states, phi))
    if not examples:
        raise DataError("no demonstrations with at least two fixations")
    return examples


def _visit_mask(examples, S: int, min_visits: int) -> np.ndarray:
    if min_visits <= 0:
        return np.ones(S)
    counts = np.zeros(S)
    for ex in examples:
        counts += np.bincount(ex.states, minlength=S)
    return (counts >= min_visits).astype(float)


def trajectory_terms(mdp: FixationMdp, rewards: np.ndarray, states: np.ndarray, onehot=None):
    """NLL and reward gradients for a batch of equal-length demonstrations.

    ``rewards`` is (B, N-1, S): the reward map used for each decision;
    ``states`` is (B, N). Returns (nll per demo (B,), grad (B, N-1, S))."""
    B, N = states.shape
    S = mdp.num_states
    rho = np.concatenate([np.zeros((B, 1, S)), rewards], axis=1)
    policy = soft_backup(mdp.next_state, rho, mdp.gamma).policy  # (B, N-1, S, A)
    start = np.zeros((B, S))
    start[np.arange(B), states[:, 0]] = 1.0
    D = state_occupancy(mdp, policy, start, N, onehot)  # (B, N, S)

    rows = policy[np.arange(B)[:, None], np.arange(N - 1)[None, :], states[:, :-1]]  # (B, N-1, A)
    hit = mdp.next_state[states[:, :-1]] == states[:, 1:, None]
    p = (rows * hit).sum(axis=-1)
    with np.errstate(divide="ignore"):
        nll = -np.log(p).sum(axis=1)

    visited = np.zeros((B, N, S))
    visited[np.arange(B)[:, None], np.arange(N)[None, :], states] = 1.0
    disc = mdp.gamma ** np.arange(1, N)
    grad = disc[None, :, None] * (D[:, 1:] - visited[:, 1:])
    return nll, grad


def _batch_step(params, adam, batch, mdp, lr, mask, onehot):
    d = params.config.input_dim
    S = mdp.num_states
    phi = np.concatenate([ex.phi.reshape(-1, d) for ex in batch])
    r, cache = forward(params, phi, train_mode=True)
    grad_r = np.empty_like(r)
    nll_sum = 0.0
    offsets = np.cumsum([0] + [ex.phi.shape[0] * S for ex in batch])
    by_len = {}
    for j, ex in enumerate(batch):
        by_len.setdefault(len(ex.states), []).append(j)
    for N, idx in by_len.items():
        rewards = np.stack([r[offsets[j]:offsets[j + 1]].reshape(N - 1, S) for j in idx])
        states = np.stack([batch[j].states for j in idx])
        nll, grad = trajectory_terms(mdp, rewards, states, onehot)
        nll_sum += nll.sum()
        for k, j in enumerate(idx):
            grad_r[offsets[j]:offsets[j + 1]] = (grad[k] * mask).ravel()
    if not np.isfinite(nll_sum):
        raise NumericalError(f"non-finite training loss (lr={lr:g}); demonstrations may contain "
                             "transitions the action model cannot produce")
    grads = backward(params, cache, grad_r / len(batch))
    params = update_running_stats(params, cache)
    params, adam = adam_step(params, grads, adam, lr)
    return params, adam, nll_sum, grad_norm(grads)


def train(scenes: Sequence[SceneSequence], grid: GridSpec, cfg: TrainConfig = TrainConfig(),
          params: Optional[RewardNetParams] = None, examples: Optional[list] = None):
    """Fit the reward network to the scenes' demonstrations.

    Returns (params, history). With ``cfg.epochs == 0`` the initial
    parameters are returned untouched."""
    if not scenes:
        raise DataError("no training scenes")
    if examples is None:
        examples = build_examples(scenes, grid, cfg.state, cfg.frames_per_sequence)
    d = examples[0].phi.shape[-1]
    if params is None:
        params = init_params(NetConfig(d, cfg.hidden_widths, cfg.normalization), cfg.seed)
    elif params.config.input_dim != d:
        raise ValidationError(f"network expects {params.config.input_dim} features, data has {d}")
    mdp = build_mdp(grid, cfg.action_model, cfg.gamma)
    onehot = mdp.successor_onehot()
    mask = _visit_mask(examples, mdp.num_states, cfg.min_visits)
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    history = TrainingHistory()
    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        lr = lr_at_epoch(cfg.schedule, epoch)
        order = rng.permutation(len(examples))
        nll_total, norms = 0.0, []
        for b in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[b:b + cfg.batch_size]]
            params, adam, nll_sum, gnorm = _batch_step(params, adam, batch, mdp, lr, mask, onehot)
            nll_total += nll_sum
            norms.append(gnorm)
        rec = EpochRecord(epoch, float(nll_total / len(examples)), float(np.mean(norms)), float(lr),
                          time.perf_counter() - tic)
        history.records.append(rec)
        log.info("epoch %d nll %.4f grad %.4f lr %.2e", epoch, rec.nll, rec.grad_norm, lr)
    history.optimizer = adam
    return params, history


def rewards_for(params: RewardNetParams, examples: Sequence[Example]) -> list:
    """Eval-mode reward maps (N-1, S) for each example."""
    out = []
    for ex in examples:
        r, _ = forward(params, ex.phi.reshape(-1, ex.phi.shape[-1]), train_mode=False)
        out.append(r.reshape(ex.phi.shape[:2]))
    return out


def evaluate_nll(params: RewardNetParams, examples: Sequence[Example], mdp: FixationMdp) -> float:
    """Mean per-demonstration negative log-likelihood in eval mode."""
    total = 0.0
    for ex, r in zip(examples, rewards_for(params, examples)):
        nll, _ = trajectory_terms(mdp, r[None], ex.states[None])
        total += nll[0]
    return float(total / len(examples))


def decision_policies(mdp: FixationMdp, rewards: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Policy rows used at each demonstrated decision, (N-1, S, A)."""
    rho = np.concatenate([np.zeros((1, mdp.num_states)), rewards], axis=0)
    return soft_backup(mdp.next_state, rho, mdp.gamma).policy


def recovery_scores(learned: RewardNetParams, planted: RewardNetParams, examples: Sequence[Example],
                    mdp: FixationMdp) -> dict:
    """How well a learned reward reproduces a known one on held-out demonstrations.

    ``argmax_match`` is the fraction of decisions whose best patch agrees.
    ``policy_kld`` is KL(planted policy || learned policy), averaged over every
    state at every decision.
    """
    hits, klds = [], []
    for ex, a, b in zip(examples, rewards_for(learned, examples), rewards_for(planted, examples)):
        hits.append(a.argmax(axis=1) == b.argmax(axis=1))
        p = decision_policies(mdp, b, ex.states)
        q = decision_policies(mdp, a, ex.states)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
        klds.append(terms.sum(axis=-1).ravel())
    return {"argmax_match": float(np.concatenate(hits).mean()), "policy_kld": float(np.concatenate(klds).mean())}
