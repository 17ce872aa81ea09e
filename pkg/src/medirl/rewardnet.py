"""Per-patch reward network with hand-written backward pass, Adam and the LR schedule.

The network is a stack of shared dense layers applied to every patch row
(equivalent to 1x1 convolutions over the fused state map):
affine -> ReLU -> batch norm, repeated, then a linear scalar head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, NumericalError, ValidationError
from .ften import atomic_write_text, read_tensor, write_tensor

BN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (52, 34, 20, 20)
    normalization: bool = True
    momentum: float = 0.9  # weight of the old running statistic

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValidationError("layer widths must be positive")


@dataclass(frozen=True)
class RewardNetParams:
    config: NetConfig
    tensors: dict  # trainable, name -> array
    buffers: dict  # running normalization statistics
    version: int = 0

    @property
    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "RewardNetParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()},
                       buffers={k: v.copy() for k, v in self.buffers.items()})

    def equals(self, other: "RewardNetParams") -> bool:
        return (self.config == other.config
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
                and all(np.array_equal(v, other.buffers[k]) for k, v in self.buffers.items()))


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: NetConfig, seed: int) -> RewardNetParams:
    rng = np.random.default_rng(seed)
    tensors, buffers = {}, {}
    width = config.input_dim
    for i, out in enumerate(config.hidden_widths):
        tensors[f"W{i}"] = _glorot(rng, width, out, (width, out))
        tensors[f"b{i}"] = np.zeros(out)
        if config.normalization:
            tensors[f"scale{i}"] = np.ones(out)
            tensors[f"shift{i}"] = np.zeros(out)
            buffers[f"mean{i}"] = np.zeros(out)
            buffers[f"var{i}"] = np.ones(out)
        width = out
    tensors["w_out"] = _glorot(rng, width, 1, (width,))
    tensors["b_out"] = np.zeros(())
    return RewardNetParams(config, tensors, buffers)


@dataclass
class ForwardCache:
    version: int
    train_mode: bool
    rows: int
    layers: list = field(default_factory=list)  # (h_in, z, xhat, inv_std) per hidden layer
    last: Optional[np.ndarray] = None
    batch_stats: list = field(default_factory=list)  # (mean, var) per layer in train mode


def forward(params: RewardNetParams, phi: np.ndarray, train_mode: bool = False):
    """Rewards for every row of ``phi`` (shape (S, d)) and the cache for :func:`backward`.

    In train mode normalization uses statistics of the rows passed in; in
    eval mode it uses the running statistics and the call is pure."""
    cfg = params.config
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[1] != cfg.input_dim:
        raise ValidationError(f"features of shape {phi.shape} do not match input_dim {cfg.input_dim}")
    if not np.all(np.isfinite(phi)):
        raise ValidationError("features contain non-finite values")
    T = params.tensors
    cache = ForwardCache(params.version, train_mode, phi.shape[0])
    h = phi
    for i in range(len(cfg.hidden_widths)):
        z = h @ T[f"W{i}"] + T[f"b{i}"]
        a = np.maximum(z, 0.0)
        xhat = inv_std = None
        out = a
        if cfg.normalization:
            if train_mode:
                mean, var = a.mean(axis=0), a.var(axis=0)
                cache.batch_stats.append((mean, var))
            else:
                mean, var = params.buffers[f"mean{i}"], params.buffers[f"var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mean) * inv_std
            out = T[f"scale{i}"] * xhat + T[f"shift{i}"]
        cache.layers.append((h, z, xhat, inv_std))
        h = out
    cache.last = h
    r = h @ T["w_out"] + T["b_out"]
    if not np.all(np.isfinite(r)):
        raise NumericalError("non-finite reward; parameters have diverged")
    return r, cache


def backward(params: RewardNetParams, cache: ForwardCache, grad_r: np.ndarray) -> dict:
    """Gradients of sum(grad_r * r) with respect to every trainable tensor."""
    if cache.version != params.version:
        raise ValidationError("cache was produced by a different parameter version")
    grad_r = np.asarray(grad_r, dtype=float)
    if grad_r.shape != (cache.rows,):
        raise ValidationError(f"grad_r shape {grad_r.shape} does not match {cache.rows} rows")
    cfg = params.config
    T = params.tensors
    grads = {"w_out": cache.last.T @ grad_r, "b_out": np.asarray(grad_r.sum())}
    g = np.outer(grad_r, T["w_out"])
    N = cache.rows
    for i in reversed(range(len(cfg.hidden_widths))):
        h_in, z, xhat, inv_std = cache.layers[i]
        if cfg.normalization:
            scale = T[f"scale{i}"]
            grads[f"scale{i}"] = (g * xhat).sum(axis=0)
            grads[f"shift{i}"] = g.sum(axis=0)
            gx = g * scale
            if cache.train_mode:
                g = inv_std / N * (N * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            else:
                g = gx * inv_std
        g = g * (z > 0)
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ T[f"W{i}"].T
    return grads


def update_running_stats(params: RewardNetParams, cache: ForwardCache) -> RewardNetParams:
    if not cache.batch_stats:
        return params
    mom = params.config.momentum
    buffers = dict(params.buffers)
    for i, (mean, var) in enumerate(cache.batch_stats):
        buffers[f"mean{i}"] = mom * buffers[f"mean{i}"] + (1 - mom) * mean
        buffers[f"var{i}"] = mom * buffers[f"var{i}"] + (1 - mom) * var
    return replace(params, buffers=buffers)


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# --- optimizer -------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params: RewardNetParams, **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()}, **kw)


def adam_step(params: RewardNetParams, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new (params, state)."""
    if grads.keys() != params.tensors.keys():
        raise ValidationError("gradient names do not match parameters")
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape:
            raise ValidationError(f"gradient {k} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    tensors, m_new, v_new = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k] + state.weight_decay * p if state.weight_decay else grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensors[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[k], v_new[k] = m, v
    return (replace(params, tensors=tensors, version=params.version + 1),
            replace(state, m=m_new, v=v_new, step=t))


@dataclass(frozen=True)
class LrSchedule:
    lr_init: float = 1.5e-4
    lr_peak: float = 5e-4
    warmup_epochs: int = 10
    decay_start_epoch: int = 11
    decay_factor: float = 0.25
    decay_every: int = 3

    def __post_init__(self):
        if min(self.lr_init, self.lr_peak, self.decay_factor) <= 0 or self.warmup_epochs < 1 or self.decay_every < 1:
            raise ValidationError("schedule values must be positive")
        if self.warmup_epochs >= self.decay_start_epoch:
            raise ValidationError("warmup must end before decay starts")


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    """Linear warmup over epochs 1..warmup_epochs, then a step decay every
    ``decay_every`` epochs counted from ``decay_start_epoch`` (14, 17, ... by default)."""
    if epoch < 1:
        raise ValidationError("epochs are numbered from 1")
    if epoch < sched.warmup_epochs:
        f = (epoch - 1) / max(sched.warmup_epochs - 1, 1)
        return sched.lr_init * (1 - f) + sched.lr_peak * f
    if epoch < sched.decay_start_epoch:
        return sched.lr_peak
    steps = (epoch - sched.decay_start_epoch) // sched.decay_every
    return sched.lr_peak * sched.decay_factor ** steps


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(directory, params: RewardNetParams, adam: Optional[AdamState] = None,
                    epoch: int = 0, seed: int = 0, extra: Optional[dict] = None) -> Path:
    """Named float64 FTEN tensors plus a ``checkpoint.json`` sidecar."""
    directory = Path(directory)
    refs = {}
    for prefix, group in (("param", params.tensors), ("buffer", params.buffers)):
        for k, v in group.items():
            name = f"{prefix}_{k}.ften"
            write_tensor(directory / name, v, dtype_code=2)
            refs[f"{prefix}:{k}"] = name
    optimizer = None
    if adam is not None:
        optimizer = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                     "weight_decay": adam.weight_decay, "moments": {}}
        for k in adam.m:
            for tag, group in (("m", adam.m), ("v", adam.v)):
                name = f"adam_{tag}_{k}.ften"
                write_tensor(directory / name, group[k], dtype_code=2)
                optimizer["moments"][f"{tag}:{k}"] = name
    sidecar = {"config": asdict(params.config), "tensors": refs, "optimizer": optimizer,
               "epoch": epoch, "seed": seed}
    if extra:
        sidecar.update(extra)
    path = directory / "checkpoint.json"
    atomic_write_text(path, json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory):
    """Returns (params, adam_state_or_None, sidecar dict)."""
    directory = Path(directory)
    path = directory / "checkpoint.json" if directory.is_dir() else directory
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    base = path.parent
    try:
        meta = json.loads(path.read_text())
        cfg = meta["config"]
        config = NetConfig(int(cfg["input_dim"]), tuple(cfg["hidden_widths"]), bool(cfg["normalization"]),
                           float(cfg.get("momentum", 0.9)))
        tensors, buffers = {}, {}
        for key, ref in meta["tensors"].items():
            prefix, name = key.split(":", 1)
            (tensors if prefix == "param" else buffers)[name] = read_tensor(base / ref).astype(float)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc
    params = RewardNetParams(config, tensors, buffers)
    reference = init_params(config, 0)
    for group, ref in ((tensors, reference.tensors), (buffers, reference.buffers)):
        if group.keys() != ref.keys() or any(group[k].shape != ref[k].shape for k in ref):
            raise DataError(f"{path}: tensors do not match the network configuration")
    adam = None
    opt = meta.get("optimizer")
    if opt:
        m = {k.split(":", 1)[1]: read_tensor(base / v) for k, v in opt["moments"].items() if k.startswith("m:")}
        v = {k.split(":", 1)[1]: read_tensor(base / r) for k, r in opt["moments"].items() if k.startswith("v:")}
        adam = AdamState(m, v, int(opt["step"]), opt["beta1"], opt["beta2"], opt["eps"], opt["weight_decay"])
    return params, adam, meta
