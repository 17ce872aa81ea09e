"""Simulated fovea: blurred periphery, fixation masks and the masked state updates."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import FixationPoint, GridSpec, PatchIndex, check_patch, patch_center, upsample_patches

SIGMA_MAX = 64.0


@dataclass(frozen=True)
class FoveaMask:
    E: np.ndarray
    fixation: PatchIndex
    mode: str = "patch"

    def pixels(self, grid: GridSpec) -> np.ndarray:
        """Mask at pixel resolution, shape (h, w)."""
        if self.E.shape == (grid.frame_h, grid.frame_w):
            return self.E
        if self.E.shape == (grid.n, grid.m):
            return upsample_patches(grid, self.E)
        raise ValidationError(f"mask shape {self.E.shape} matches neither grid nor frame")


@dataclass(frozen=True)
class FoveatedState:
    O: np.ndarray
    k: int = 0
    t: int = 1
    history: tuple[PatchIndex, ...] = ()
    frame_start: int = 0  # index into history where frame t begins


def _mirror_index(idx: np.ndarray, size: int) -> np.ndarray:
    # half-sample symmetric extension: ... c b a | a b c ... | c b a ...
    idx = np.mod(idx, 2 * size)
    return np.where(idx >= size, 2 * size - 1 - idx, idx)


@functools.lru_cache(maxsize=256)
def _blur_matrix(size: int, sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    mat = np.zeros((size, size))
    rows = np.arange(size)[:, None]
    cols = _mirror_index(rows + offsets[None, :], size)
    np.add.at(mat, (np.broadcast_to(rows, cols.shape), cols), np.broadcast_to(kernel, cols.shape))
    mat.flags.writeable = False  # shared through the cache
    return mat


def gaussian_blur(H: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an (h, w[, c]) tensor, kernel radius ceil(3*sigma),
    mirrored borders. sigma == 0 returns the input unchanged."""
    if sigma < 0:
        raise ValidationError("sigma must be nonnegative")
    H = np.asarray(H, dtype=float)
    if not np.all(np.isfinite(H)):
        raise ValidationError("blur input contains non-finite values")
    if sigma == 0:
        return H.copy()
    rows = _blur_matrix(H.shape[0], sigma)
    cols = _blur_matrix(H.shape[1], sigma)
    if H.ndim == 2:
        return rows @ H @ cols.T
    h, w, c = H.shape
    out = (rows @ H.reshape(h, w * c)).reshape(h, w, c)
    return np.matmul(cols, out)  # (w, w) @ (h, w, c) contracts the width axis per row


def peripheral_sigma(p: FixationPoint, frame: tuple[int, int], sigma_max: float = SIGMA_MAX,
                     distance: str = "center") -> float:
    """Blur width for the periphery: twice the fixation's distance to the frame
    center (or to the nearest border), capped at ``sigma_max``."""
    h, w = frame
    if distance == "center":
        d = math.hypot(p.x - w / 2.0, p.y - h / 2.0)
    elif distance == "border":
        d = min(p.x, p.y, w - 1 - p.x, h - 1 - p.y)
    else:
        raise ValidationError(f"unknown distance mode {distance!r}")
    return min(2.0 * d, sigma_max)


def make_fovea_mask(grid: GridSpec, s: PatchIndex, mode: str = "patch", radius: float = 12.0) -> FoveaMask:
    s = check_patch(grid, s)
    if mode == "patch":
        E = np.zeros((grid.n, grid.m))
        E[s] = 1.0
    elif mode == "circular":
        if radius <= 0:
            raise ValidationError("circular mask radius must be positive")
        cx, cy = patch_center(grid, s)
        yy, xx = np.mgrid[0:grid.frame_h, 0:grid.frame_w]
        E = ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2).astype(float)
    else:
        raise ValidationError(f"unknown mask mode {mode!r}")
    return FoveaMask(E, s, mode)


def init_state(L: np.ndarray) -> FoveatedState:
    L = np.asarray(L, dtype=float)
    return FoveatedState(O=L.copy(), k=0, t=1, history=(), frame_start=0)


def _blend(E: np.ndarray, H: np.ndarray, O: np.ndarray) -> np.ndarray:
    if H.shape != O.shape:
        raise ValidationError(f"feature shape {H.shape} != state shape {O.shape}")
    if E.shape != H.shape[:2]:
        raise ValidationError(f"mask shape {E.shape} != frame shape {H.shape[:2]}")
    if H.ndim == 3:
        E = E[:, :, None]
    return E * H + (1.0 - E) * O


def update_within_frame(state: FoveatedState, H: np.ndarray, E: FoveaMask, grid: GridSpec) -> FoveatedState:
    O = _blend(E.pixels(grid), np.asarray(H, dtype=float), state.O)
    return FoveatedState(O, state.k + 1, state.t, state.history + (E.fixation,), state.frame_start)


def advance_frame(state: FoveatedState, H_next: np.ndarray, E_first: FoveaMask, grid: GridSpec) -> FoveatedState:
    """Carry the end-of-frame context into the next frame, refreshed at its first fixation."""
    O = _blend(E_first.pixels(grid), np.asarray(H_next, dtype=float), state.O)
    return FoveatedState(O, 1, state.t + 1, state.history + (E_first.fixation,), len(state.history))
