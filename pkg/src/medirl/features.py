"""Per-frame scene features, their fusion into per-patch vectors, synthesis and file I/O."""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ValidationError
from .ften import atomic_write_text, read_tensor, write_tensor
from .grid import FixationPoint, FixationSequence, GridSpec, patch_center, pool_patches

DEPTH_GAIN = 1.2
MAX_SPEED = 100.0


class TaskLabel(enum.Enum):
    LANE_KEEPING = "lane-keeping"
    MERGING_IN = "merging-in"
    BRAKING = "braking"


TASK_ORDER = (TaskLabel.LANE_KEEPING, TaskLabel.MERGING_IN, TaskLabel.BRAKING)


@dataclass(frozen=True)
class VehicleState:
    speed: float

    def __post_init__(self):
        if not np.isfinite(self.speed) or self.speed < 0:
            raise ValidationError(f"speed must be finite and nonnegative, got {self.speed}")


Box = tuple[int, int, int, int]  # row0, col0, row1, col1 in pixels, end-exclusive


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    X: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    M: Optional[Box]
    U: np.ndarray
    D: np.ndarray
    irrelevant: Optional[np.ndarray] = None

    def __post_init__(self):
        hw = self.X.shape[:2]
        for name in ("X", "Y", "G", "U", "D"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != hw:
                raise ValidationError(f"{name} has shape {arr.shape}, expected ({hw[0]}, {hw[1]}, c)")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        for name in ("G", "U", "D"):
            arr = getattr(self, name)
            if arr.shape[2] != 1:
                raise ValidationError(f"{name} must have one channel")
            if arr.min() < 0 or arr.max() > 1:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.M is not None:
            r0, c0, r1, c1 = self.M
            if not (0 <= r0 < r1 <= hw[0] and 0 <= c0 < c1 <= hw[1]):
                raise ValidationError(f"lead box {self.M} outside frame")
        if self.irrelevant is not None and self.irrelevant.shape != hw:
            raise ValidationError("irrelevant mask does not match frame")

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[:2]

    def box_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape)
        if self.M is not None:
            r0, c0, r1, c1 = self.M
            mask[r0:r1, c0:c1] = 1.0
        return mask

    def __eq__(self, other):
        if not isinstance(other, FrameFeatures):
            return NotImplemented
        same = all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("X", "Y", "G", "U", "D"))
        if (self.irrelevant is None) != (other.irrelevant is None):
            return False
        if self.irrelevant is not None:
            same = same and np.array_equal(self.irrelevant, other.irrelevant)
        return same and self.M == other.M


@dataclass(frozen=True)
class SceneSequence:
    frames: tuple[FrameFeatures, ...]
    task: TaskLabel
    speeds: tuple[VehicleState, ...]
    ground_truth_fixations: Optional[tuple[FixationSequence, ...]] = None
    video_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValidationError("scene has no frames")
        if len(self.speeds) != len(self.frames):
            raise ValidationError(f"{len(self.speeds)} speeds for {len(self.frames)} frames")
        shapes = {(f.X.shape, f.Y.shape) for f in self.frames}
        if len(shapes) != 1:
            raise ValidationError("frames do not share dimensions")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames[0].shape


@dataclass(frozen=True)
class FeatureToggles:
    X: bool = True
    Y: bool = True
    G: bool = True
    M: bool = True  # lead box indicator and brake-light map together
    D: bool = True
    Q: bool = True
    v: bool = True

    def __post_init__(self):
        if not any(getattr(self, f.name) for f in fields(self)):
            raise ValidationError("at least one feature group must be enabled")

    def without(self, *groups: str) -> "FeatureToggles":
        unknown = set(groups) - {f.name for f in fields(self)}
        if unknown:
            raise ValidationError(f"unknown feature group(s): {sorted(unknown)}")
        return replace(self, **{g: False for g in groups})


def amplify_depth(Y: np.ndarray, D: np.ndarray, lam: float = DEPTH_GAIN) -> np.ndarray:
    """Z = Y * (lam * D) + Y, with the single-channel depth broadcast over Y."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    if lam < 0:
        raise ValidationError("amplification factor must be nonnegative")
    if D.ndim == Y.ndim - 1:
        D = D[..., None]
    if D.shape[:-1] != Y.shape[:-1] or D.shape[-1] not in (1, Y.shape[-1]):
        raise ValidationError(f"depth shape {D.shape} does not align with {Y.shape}")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(D))):
        raise ValidationError("non-finite input to depth amplification")
    return Y * (lam * D) + Y


def classify_task(lane_change: bool, signal: bool) -> TaskLabel:
    if lane_change:
        return TaskLabel.MERGING_IN
    return TaskLabel.BRAKING if signal else TaskLabel.LANE_KEEPING


def feature_names(toggles: FeatureToggles, d_x: int, d_y: int) -> list[str]:
    names = []
    if toggles.X:
        names += [f"O{i}" for i in range(d_x)]
    if toggles.Y:
        names += [f"Z{i}" for i in range(d_y)]
    if toggles.G:
        names.append("G")
    if toggles.M:
        names += ["U", "M"]
    if toggles.Q:
        names += [f"task:{t.value}" for t in TASK_ORDER]
    if toggles.v:
        names.append("speed")
    return names


def static_patch_features(f: FrameFeatures, grid: GridSpec, task: TaskLabel, v: VehicleState,
                          toggles: FeatureToggles, lam: float = DEPTH_GAIN,
                          max_speed: float = MAX_SPEED) -> np.ndarray:
    """Columns of the patch features that do not depend on the fixation history,
    shaped (S, k); they follow the foveated context columns."""
    S = grid.num_states
    after = []
    if toggles.Y:
        Z = amplify_depth(f.Y, f.D, lam) if toggles.D else f.Y
        after.append(pool_patches(grid, Z).reshape(S, -1))
    if toggles.G:
        after.append(pool_patches(grid, f.G).reshape(S, 1))
    if toggles.M:
        after.append(pool_patches(grid, f.U).reshape(S, 1))
        after.append(pool_patches(grid, f.box_mask()).reshape(S, 1))
    if toggles.Q:
        onehot = np.array([task is t for t in TASK_ORDER], dtype=float)
        after.append(np.tile(onehot, (S, 1)))
    if toggles.v:
        after.append(np.full((S, 1), min(max(v.speed / max_speed, 0.0), 1.0)))
    return np.concatenate(after, axis=1) if after else np.zeros((S, 0))


def assemble_patch_features(f: FrameFeatures, state, grid: GridSpec, task: TaskLabel, v: VehicleState,
                            toggles: FeatureToggles, lam: float = DEPTH_GAIN,
                            max_speed: float = MAX_SPEED) -> np.ndarray:
    """Per-patch feature matrix (S, d) fusing the foveated context with the frame cues.

    Column order follows :func:`feature_names`."""
    if f.shape != (grid.frame_h, grid.frame_w):
        raise ValidationError(f"frame {f.shape} does not match grid {grid.frame_h}x{grid.frame_w}")
    parts = []
    if toggles.X:
        if state.O.shape != f.X.shape:
            raise ValidationError(f"state context {state.O.shape} does not match X {f.X.shape}")
        parts.append(pool_patches(grid, state.O).reshape(grid.num_states, -1))
    parts.append(static_patch_features(f, grid, task, v, toggles, lam, max_speed))
    return np.concatenate(parts, axis=1)


# --- synthesis -----------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    d_x: int = 2
    d_y: int = 2
    brake_onset: Optional[int] = 3
    num_distractors: int = 3
    num_vehicles: int = 2
    lead_scale_start: tuple[float, float] = (1.1, 1.2)  # (height, width) in patches
    lead_scale_end: tuple[float, float] = (1.5, 1.8)
    vehicle_scale: tuple[float, float] = (1.0, 1.3)
    appearance: tuple[float, float] = (0.3, 1.0)  # range of the per-object Y channel 1 value
    blob_sigma: float = 4.0
    lane_halfwidth: float = 1.0
    noise: float = 0.02
    lead_rows: tuple[int, int] = (3, 4)  # inclusive range of starting grid rows
    lead_step: int = 1  # columns travelled per frame
    task: Optional[TaskLabel] = None

    def validate(self):
        if self.d_x < 1 or self.d_y < 1:
            raise ValidationError("feature depths must be positive")
        scales = self.lead_scale_start + self.lead_scale_end + self.vehicle_scale
        if min(scales) <= 0 or self.blob_sigma <= 0 or self.lane_halfwidth <= 0:
            raise ValidationError("object sizes must be positive")
        if self.lead_step < 0:
            raise ValidationError("lead_step must be nonnegative")
        if self.num_distractors < 0 or self.num_vehicles < 0:
            raise ValidationError("object counts must be nonnegative")
        if not 0.0 <= self.appearance[0] <= self.appearance[1]:
            raise ValidationError("appearance range must satisfy 0 <= low <= high")


def _box_around(cx: int, cy: int, h: float, w: float, frame: tuple[int, int]) -> Box:
    hh, ww = max(int(round(h)), 1), max(int(round(w)), 1)
    r0 = max(cy - hh // 2, 0)
    c0 = max(cx - ww // 2, 0)
    return r0, c0, min(r0 + hh, frame[0]), min(c0 + ww, frame[1])


def synth_scene(seed: int, grid: GridSpec, T: int, params: SynthParams = SynthParams(),
                video_id: Optional[str] = None) -> SceneSequence:
    """Deterministic synthetic driving clip (numpy PCG64 seeded with ``seed``).

    A lead vehicle drifts one patch per frame and grows as it approaches, its
    brake light switches on at ``brake_onset``; parked vehicles sit lower in
    the frame, irrelevant blobs (trees, signs) sit above the horizon."""
    if T < 1:
        raise ValidationError("need at least one frame")
    params.validate()
    rng = np.random.default_rng(seed)
    h, w = grid.frame_h, grid.frame_w
    n, m = grid.n, grid.m
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    horizon = h // 3

    depth = np.where(yy >= horizon, (yy - horizon) / max(h - 1 - horizon, 1), 0.0)
    vx, vy = w / 2.0, float(horizon)
    lanes = np.zeros((h, w))
    below = yy >= horizon
    for spread in (-0.4, 0.4):
        x_line = vx + spread * w * (yy - vy) / max(h - 1 - vy, 1)
        lanes = np.maximum(lanes, (np.abs(xx - x_line) <= params.lane_halfwidth) & below)

    task = params.task
    if task is None:
        task = classify_task(bool(rng.integers(2)), bool(rng.integers(2)))

    # lead vehicle path over patch centers
    lo, hi = params.lead_rows
    lo, hi = min(lo, n - 1), min(hi, n - 1)
    row = int(rng.integers(lo, hi + 1))
    col = int(rng.integers(0, m))
    step = params.lead_step if col < m / 2 else -params.lead_step
    path = []
    for t in range(T):
        path.append((row, col))
        if t == T // 2 - 1 and row < n - 1:
            row += 1
        if not 0 <= col + step < m:
            step = -step
        col = min(max(col + step, 0), m - 1)
    lead_cells = set(path)

    vehicles = []
    free = [(r, c) for r in range(max(n - 2, 0), n) for c in range(m) if (r, c) not in lead_cells]
    picks = rng.permutation(len(free))[:params.num_vehicles] if free else []
    for i in picks:
        r, c = free[i]
        cx, cy = patch_center(grid, (r, c))
        sh, sw = rng.uniform(*params.vehicle_scale, size=2)
        box = _box_around(cx, cy, sh * grid.patch_h, sw * grid.patch_w, (h, w))
        look = float(rng.uniform(*params.appearance))
        vehicles.append((box, look, rng.uniform(*params.appearance, size=max(params.d_y - 2, 0))))

    blobs = np.zeros((h, w))
    for _ in range(params.num_distractors):
        bx = rng.uniform(0, w)
        by = rng.uniform(0, max(horizon, 1))
        blobs = np.maximum(blobs, np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * params.blob_sigma ** 2)))
    irrelevant = blobs > 0.3

    lead_appearance = float(rng.uniform(*params.appearance))
    lead_extra = rng.uniform(*params.appearance, size=max(params.d_y - 2, 0))
    speed = float(rng.uniform(30.0, 70.0))
    onset = params.brake_onset

    frames, speeds = [], []
    for t in range(T):
        r, c = path[t]
        frac = t / (T - 1) if T > 1 else 0.0
        sh = params.lead_scale_start[0] + frac * (params.lead_scale_end[0] - params.lead_scale_start[0])
        sw = params.lead_scale_start[1] + frac * (params.lead_scale_end[1] - params.lead_scale_start[1])
        cx, cy = patch_center(grid, (r, c))
        lead = _box_around(cx, cy, sh * grid.patch_h, sw * grid.patch_w, (h, w))

        X = np.zeros((h, w, params.d_x))
        Y = np.zeros((h, w, params.d_y))
        X[:, :, 0] = 0.5 * lanes
        for box, look, extra in vehicles:
            r0, c0, r1, c1 = box
            X[r0:r1, c0:c1, 0] = 1.0
            Y[r0:r1, c0:c1, 0] = 1.0
            if params.d_y > 1:
                Y[r0:r1, c0:c1, 1] = look
            if params.d_y > 2:
                Y[r0:r1, c0:c1, 2:] = extra
        r0, c0, r1, c1 = lead
        X[r0:r1, c0:c1, 0] = 1.0
        Y[r0:r1, c0:c1, 0] = 1.0
        if params.d_y > 1:
            Y[r0:r1, c0:c1, 1] = lead_appearance
        if params.d_y > 2:
            Y[r0:r1, c0:c1, 2:] = lead_extra
        if params.d_x > 1:
            X[:, :, 1] = blobs
        if params.noise > 0:
            X += params.noise * rng.standard_normal(X.shape)

        U = np.zeros((h, w, 1))
        if onset is not None and t >= onset:
            pr0 = r * grid.patch_h
            pc0 = c * grid.patch_w
            br0, br1 = max(cy + 1, r0, pr0), min(cy + 5, r1, pr0 + grid.row_heights[r])
            half = min(int(0.4 * grid.patch_w), (c1 - c0) // 2)
            bc0, bc1 = max(cx - half, c0, pc0), min(cx + half + 1, c1, pc0 + grid.col_widths[c])
            U[br0:br1, bc0:bc1, 0] = 1.0

        frames.append(FrameFeatures(X=X, Y=Y, G=lanes[:, :, None].astype(float), M=lead, U=U,
                                    D=depth[:, :, None], irrelevant=irrelevant.astype(float)))
        braking = onset is not None and t >= onset
        speeds.append(VehicleState(max(speed - (4.0 * (t - onset + 1) if braking else 0.0), 0.0)))

    return SceneSequence(tuple(frames), task, tuple(speeds), None,
                         video_id if video_id is not None else f"synth-{seed}")


# --- files ---------------------------------------------------------------

FIXATION_HEADER = ["driver_id", "frame_index", "x", "y", "duration_ms"]


def write_fixations(path, sequences: Sequence[FixationSequence]) -> None:
    lines = [",".join(FIXATION_HEADER)]
    for seq in sequences:
        for p in seq.points:
            lines.append(f"{seq.driver_id},{p.frame_index},{p.x:g},{p.y:g},{p.duration:g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_fixations(path, video_id: str = "") -> tuple[FixationSequence, ...]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: fixation file not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIXATION_HEADER:
            raise DataError(f"{path}: expected header {','.join(FIXATION_HEADER)}")
        by_driver: dict[str, list[FixationPoint]] = {}
        for row in reader:
            try:
                p = FixationPoint(float(row["x"]), float(row["y"]), float(row["duration_ms"]),
                                  int(row["frame_index"]))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed row {row}") from exc
            by_driver.setdefault(row["driver_id"], []).append(p)
    return tuple(FixationSequence(tuple(pts), d, video_id) for d, pts in by_driver.items())


def save_scene(scene: SceneSequence, directory) -> Path:
    """Write tensors and a manifest.json describing ``scene`` into ``directory``."""
    directory = Path(directory)
    frames = []
    for t, f in enumerate(scene.frames):
        entry = {}
        for key, arr in (("x", f.X), ("y", f.Y), ("g", f.G), ("u", f.U), ("d", f.D)):
            name = f"frame{t:03d}_{key}.ften"
            write_tensor(directory / name, arr, dtype_code=2)
            entry[key] = name
        if f.irrelevant is not None:
            name = f"frame{t:03d}_irrelevant.ften"
            write_tensor(directory / name, f.irrelevant, dtype_code=2)
            entry["irrelevant"] = name
        entry["lead_box"] = list(f.M) if f.M is not None else None
        entry["speed"] = scene.speeds[t].speed
        frames.append(entry)
    manifest = {"video_id": scene.video_id, "task": scene.task.value, "frames": frames}
    if scene.ground_truth_fixations is not None:
        write_fixations(directory / "fixations.csv", scene.ground_truth_fixations)
        manifest["fixations"] = "fixations.csv"
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scene(manifest_path) -> SceneSequence:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
        base = manifest_path.parent
        task = TaskLabel(manifest["task"])
        entries = manifest["frames"]
        video_id = str(manifest.get("video_id", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{manifest_path}: malformed manifest ({exc})") from exc

    def tensor(ref, ndim):
        arr = read_tensor(base / ref).astype(float)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{base / ref}: tensor contains NaN or Inf")
        if arr.ndim != ndim:
            raise DataError(f"{base / ref}: expected {ndim} dims, got shape {arr.shape}")
        return arr

    frames, speeds = [], []
    try:
        for entry in entries:
            box = entry.get("lead_box")
            irr = entry.get("irrelevant")
            frames.append(FrameFeatures(
                X=tensor(entry["x"], 3), Y=tensor(entry["y"], 3), G=tensor(entry["g"], 3),
                M=tuple(int(v) for v in box) if box is not None else None,
                U=tensor(entry["u"], 3), D=tensor(entry["d"], 3),
                irrelevant=tensor(irr, 2) if irr is not None else None))
            speeds.append(VehicleState(float(entry["speed"])))
    except KeyError as exc:
        raise DataError(f"{manifest_path}: frame entry missing {exc}") from exc
    if "speeds" in manifest:
        speeds = [VehicleState(float(v)) for v in manifest["speeds"]]
    fixations = None
    if manifest.get("fixations"):
        fixations = read_fixations(base / manifest["fixations"], video_id)
    return SceneSequence(tuple(frames), task, tuple(speeds), fixations, video_id)
