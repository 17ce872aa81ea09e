"""Run configuration: one JSON document, overridable from the command line.

Unknown keys are rejected so that typos fail loudly instead of silently
falling back to defaults.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .episode import StateConfig
from .errors import ConfigError, MedirlError
from .features import FeatureToggles, SynthParams, TaskLabel
from .grid import build_grid
from .mdp import PATCH_TARGET, SEVEN_MACRO
from .rewardnet import LrSchedule
from .scanpath import ARGMAX, SAMPLE, IoRConfig
from .synthetic import PLANTED_WEIGHTS
from .training import TrainConfig

TOGGLE_NAMES = ("X", "Y", "G", "M", "D", "Q", "v")


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return data


@dataclass(frozen=True)
class GridConfig:
    frame_h: int = 72
    frame_w: int = 136
    patch_h: int = 12
    patch_w: int = 17

    def build(self):
        return build_grid(self.frame_h, self.frame_w, self.patch_h, self.patch_w)


@dataclass(frozen=True)
class SynthConfig:
    scenes: int = 4
    frames: int = 6
    demos_per_scene: int = 5
    fixations_per_frame: int = 3
    weights: dict = field(default_factory=lambda: dict(PLANTED_WEIGHTS))
    params: dict = field(default_factory=dict)  # SynthParams overrides

    def synth_params(self) -> SynthParams:
        kw = dict(self.params)
        _strict(SynthParams, kw, "synth.params")
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(v)
        if kw.get("task") is not None:
            kw["task"] = TaskLabel(kw["task"])
        return SynthParams(**kw)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 36
    batch_size: int = 20
    gamma: float = 0.98
    action_model: str = PATCH_TARGET
    hidden_widths: tuple = (52, 34, 20, 20)
    normalization: bool = True
    min_visits: int = 0
    schedule: dict = field(default_factory=dict)
    wall_time: bool = False  # record per-epoch seconds in the history (breaks byte-identical reruns)


@dataclass(frozen=True)
class StateSection:
    mask_mode: str = "patch"
    mask_radius: float = 12.0
    sigma_max: float = 64.0
    distance: str = "center"


@dataclass(frozen=True)
class GateConfig:
    important_frames: bool = True
    kld_threshold: float = 0.89
    window: int = 6
    filter_irrelevant: bool = True
    max_irrelevant: float = 0.40


@dataclass(frozen=True)
class EvalSection:
    sigma_smooth: float = 12.0
    threshold: float = 0.5
    negatives_factor: int = 10
    fixations_per_frame: Optional[int] = None  # None: mean observed in the training data


@dataclass(frozen=True)
class RolloutSection:
    mode: str = SAMPLE
    pgm: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    figures: bool = True
    toggles_off: tuple = ()
    grid: GridConfig = field(default_factory=GridConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainSection = field(default_factory=TrainSection)
    state: StateSection = field(default_factory=StateSection)
    gates: GateConfig = field(default_factory=GateConfig)
    ior: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)

    # --- construction ---------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _strict(cls, data, "config")
        kw = dict(data)
        sections = {"grid": GridConfig, "synth": SynthConfig, "train": TrainSection, "state": StateSection,
                    "gates": GateConfig, "eval": EvalSection, "rollout": RolloutSection}
        for key, sub in sections.items():
            if key in kw:
                kw[key] = sub(**_strict(sub, kw[key], key))
        if "toggles_off" in kw:
            kw["toggles_off"] = tuple(kw["toggles_off"])
        if "train" in kw and isinstance(kw["train"].hidden_widths, list):
            kw["train"] = replace(kw["train"], hidden_widths=tuple(kw["train"].hidden_widths))
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def override(self, **flags) -> "RunConfig":
        """Apply command-line values (None means 'not given'); flags win over the file."""
        cfg = self
        top = {k: flags[k] for k in ("seed", "out", "data", "checkpoint") if flags.get(k) is not None}
        if top:
            cfg = replace(cfg, **top)
        if flags.get("epochs") is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=flags["epochs"]))
        if flags.get("toggle_off"):
            cfg = replace(cfg, toggles_off=tuple(dict.fromkeys(cfg.toggles_off + tuple(flags["toggle_off"]))))
        synth = {k: flags[k] for k in ("scenes", "frames") if flags.get(k) is not None}
        if synth:
            cfg = replace(cfg, synth=replace(cfg.synth, **synth))
        if flags.get("mode") is not None:
            cfg = replace(cfg, rollout=replace(cfg.rollout, mode=flags["mode"]))
        if flags.get("no_figures"):
            cfg = replace(cfg, figures=False)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["toggles_off"] = list(self.toggles_off)
        d["train"]["hidden_widths"] = list(self.train.hidden_widths)
        return d

    # --- derived objects ------------------------------------------------

    def toggles(self) -> FeatureToggles:
        return FeatureToggles().without(*self.toggles_off)

    def state_config(self) -> StateConfig:
        s = self.state
        return StateConfig(self.toggles(), s.mask_mode, s.mask_radius, s.sigma_max, s.distance)

    def schedule(self) -> LrSchedule:
        _strict(LrSchedule, self.train.schedule, "train.schedule")
        return LrSchedule(**self.train.schedule)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, seed=self.seed, gamma=t.gamma,
                           action_model=t.action_model, hidden_widths=tuple(t.hidden_widths),
                           normalization=t.normalization, schedule=self.schedule(), state=self.state_config(),
                           min_visits=t.min_visits)

    def ior_config(self) -> IoRConfig:
        _strict(IoRConfig, self.ior, "ior")
        return IoRConfig(**self.ior)

    def validate(self) -> None:
        """Build every derived object once so that bad values surface before any work."""
        bad = sorted(set(self.toggles_off) - set(TOGGLE_NAMES))
        if bad:
            raise ConfigError(f"unknown feature group(s) {bad}; expected some of {','.join(TOGGLE_NAMES)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.train.action_model not in (PATCH_TARGET, SEVEN_MACRO):
            raise ConfigError(f"unknown action model {self.train.action_model!r}")
        if not 0 < self.train.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.rollout.mode not in (SAMPLE, ARGMAX):
            raise ConfigError(f"unknown rollout mode {self.rollout.mode!r}")
        if self.state.mask_mode not in ("patch", "circular") or self.state.distance not in ("center", "border"):
            raise ConfigError("state.mask_mode must be patch|circular and state.distance center|border")
        if self.synth.scenes < 1:
            raise ConfigError("synth.scenes must be at least 1")
        if not 0 < self.eval.threshold < 1 or self.eval.sigma_smooth < 0 or self.eval.negatives_factor < 1:
            raise ConfigError("eval settings out of range")
        try:
            self.grid.build()
            self.train_config()
            self.ior_config()
            self.synth.synth_params().validate()
            if self.synth.frames < 1 or self.synth.demos_per_scene < 1 or self.synth.fixations_per_frame < 1:
                raise ConfigError("synth counts must be positive")
        except ConfigError:
            raise
        except (MedirlError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
