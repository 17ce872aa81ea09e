"""Frame discretization: patches, fixation points and the seven action labels."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class GridSpec:
    frame_h: int
    frame_w: int
    patch_h: int
    patch_w: int
    n: int
    m: int
    row_heights: tuple[int, ...]
    col_widths: tuple[int, ...]

    @property
    def num_states(self) -> int:
        return self.n * self.m

    @property
    def row_edges(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.row_heights)])

    @property
    def col_edges(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.col_widths)])

    @property
    def patch_areas(self) -> np.ndarray:
        return np.outer(self.row_heights, self.col_widths).astype(float)

    @property
    def center(self) -> tuple[float, float]:
        """Frame center as (x, y) in pixels."""
        return self.frame_w / 2.0, self.frame_h / 2.0


class PatchIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class FixationPoint:
    x: float
    y: float
    duration: float = 0.0
    frame_index: int = 0


@dataclass(frozen=True)
class FixationSequence:
    points: tuple[FixationPoint, ...]
    driver_id: str = ""
    video_id: str = ""

    def __post_init__(self):
        if not self.points:
            raise ValidationError("fixation sequence is empty")
        frames = [p.frame_index for p in self.points]
        if any(b < a for a, b in zip(frames, frames[1:])):
            raise ValidationError("fixation frame indices must be nondecreasing")


class ActionLabel(enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    UP = "up"
    DOWN = "down"
    FOCUS_INWARD = "focus-inward"
    FOCUS_OUTWARD = "focus-outward"
    STAY = "stay"


# fixed order used by the seven-macro action model
ACTIONS = tuple(ActionLabel)


def _split(total: int, size: int) -> tuple[int, ...]:
    count = total // size
    sizes = [size] * count
    sizes[-1] += total - count * size
    return tuple(sizes)


def build_grid(frame_h: int, frame_w: int, patch_h: int, patch_w: int) -> GridSpec:
    """Tile a frame with patches; the last row/column absorbs the remainder."""
    dims = (frame_h, frame_w, patch_h, patch_w)
    if any(int(d) != d or d <= 0 for d in dims):
        raise ValidationError(f"grid dimensions must be positive integers, got {dims}")
    if patch_h > frame_h or patch_w > frame_w:
        raise ValidationError("patch larger than frame")
    rows = _split(frame_h, patch_h)
    cols = _split(frame_w, patch_w)
    return GridSpec(frame_h, frame_w, patch_h, patch_w, len(rows), len(cols), rows, cols)


def check_patch(grid: GridSpec, s: PatchIndex) -> PatchIndex:
    r, c = s
    if not (0 <= r < grid.n and 0 <= c < grid.m):
        raise ValidationError(f"patch {tuple(s)} outside {grid.n}x{grid.m} grid")
    return PatchIndex(int(r), int(c))


def point_to_patch(grid: GridSpec, p: FixationPoint) -> PatchIndex:
    if not (0 <= p.x < grid.frame_w and 0 <= p.y < grid.frame_h):
        raise ValidationError(f"point ({p.x}, {p.y}) outside {grid.frame_w}x{grid.frame_h} frame")
    row = min(int(p.y) // grid.patch_h, grid.n - 1)
    col = min(int(p.x) // grid.patch_w, grid.m - 1)
    return PatchIndex(row, col)


def patch_center(grid: GridSpec, s: PatchIndex) -> tuple[int, int]:
    """Integer (x, y) center of a patch's pixel extent."""
    r, c = check_patch(grid, s)
    x = c * grid.patch_w + grid.col_widths[c] // 2
    y = r * grid.patch_h + grid.row_heights[r] // 2
    return x, y


def patch_centers(grid: GridSpec) -> np.ndarray:
    """(S, 2) array of (x, y) centers in flat state order."""
    out = np.empty((grid.num_states, 2))
    for s in range(grid.num_states):
        out[s] = patch_center(grid, unflatten(grid, s))
    return out


def flatten(grid: GridSpec, s: PatchIndex) -> int:
    r, c = check_patch(grid, s)
    return r * grid.m + c


def unflatten(grid: GridSpec, s: int) -> PatchIndex:
    if not 0 <= s < grid.num_states:
        raise ValidationError(f"state {s} outside 0..{grid.num_states - 1}")
    return PatchIndex(int(s) // grid.m, int(s) % grid.m)


def center_patch(grid: GridSpec) -> PatchIndex:
    """Patch containing the frame center pixel."""
    return point_to_patch(grid, FixationPoint(grid.frame_w // 2, grid.frame_h // 2))


def classify_action(src: PatchIndex, dst: PatchIndex, grid: GridSpec) -> ActionLabel:
    src = check_patch(grid, src)
    dst = check_patch(grid, dst)
    dr, dc = dst.row - src.row, dst.col - src.col
    if dr == 0 and dc == 0:
        return ActionLabel.STAY
    if dr == 0:
        return ActionLabel.LEFT if dc < 0 else ActionLabel.RIGHT
    if dc == 0:
        return ActionLabel.UP if dr < 0 else ActionLabel.DOWN
    cx, cy = grid.center
    sx, sy = patch_center(grid, src)
    tx, ty = patch_center(grid, dst)
    if np.hypot(tx - cx, ty - cy) < np.hypot(sx - cx, sy - cy):
        return ActionLabel.FOCUS_INWARD
    return ActionLabel.FOCUS_OUTWARD


def pool_patches(grid: GridSpec, x: np.ndarray) -> np.ndarray:
    """Per-patch mean of a (h, w[, c]) array -> (n, m[, c])."""
    if x.shape[:2] != (grid.frame_h, grid.frame_w):
        raise ValidationError(f"array of shape {x.shape[:2]} does not match frame {grid.frame_h}x{grid.frame_w}")
    summed = np.add.reduceat(np.add.reduceat(x, grid.row_edges[:-1], axis=0), grid.col_edges[:-1], axis=1)
    areas = grid.patch_areas
    if x.ndim == 3:
        areas = areas[:, :, None]
    return summed / areas


def upsample_patches(grid: GridSpec, x: np.ndarray) -> np.ndarray:
    """Block-replicate an (n, m[, c]) array to pixel resolution."""
    return np.repeat(np.repeat(x, grid.row_heights, axis=0), grid.col_widths, axis=1)


def fixations_to_states(grid: GridSpec, points: Sequence[FixationPoint]) -> np.ndarray:
    return np.array([flatten(grid, point_to_patch(grid, p)) for p in points], dtype=int)
