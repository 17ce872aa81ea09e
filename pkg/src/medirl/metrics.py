"""Saliency metrics, training-frame selection and eye-data cleaning."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, NumericalError, ValidationError
from .grid import FixationPoint, FixationSequence

EPS = 2.2e-16
KLD_THRESHOLD = 0.89
WINDOW = 6
MAX_IRRELEVANT = 0.40


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=float)


def _pair(pred, gt, normalized: bool):
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValidationError(f"map shapes differ: {p.shape} vs {g.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise ValidationError("maps contain non-finite values")
    if normalized:
        for name, m in (("prediction", p), ("ground truth", g)):
            if m.min() < 0 or abs(m.sum() - 1.0) > 1e-6:
                raise ValidationError(f"{name} map is not a probability map (sum {m.sum():.6g})")
    return p, g


def kld(pred, gt) -> float:
    """KL(gt || pred) with the usual saliency-benchmark epsilon."""
    p, g = _pair(pred, gt, normalized=True)
    return float(np.sum(g * np.log(g / (p + EPS) + EPS)))


def cc(pred, gt) -> float:
    """Pearson correlation between the two maps' pixels."""
    p, g = _pair(pred, gt, normalized=False)
    p = p.ravel() - p.mean()
    g = g.ravel() - g.mean()
    sp, sg = np.sqrt(p @ p), np.sqrt(g @ g)
    if sp == 0 or sg == 0:
        raise NumericalError("correlation is undefined for a constant map")
    return float(np.clip((p @ g) / (sp * sg), -1.0, 1.0))


def _pixels(points, shape) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    for p in points:
        if isinstance(p, FixationPoint):
            r, c = int(math.floor(p.y)), int(math.floor(p.x))
        else:
            r, c = (int(v) for v in p)
        rows.append(min(max(r, 0), shape[0] - 1))
        cols.append(min(max(c, 0), shape[1] - 1))
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def sauc(pred, pos_fixations: Sequence, neg_fixations: Sequence) -> float:
    """Area under the ROC curve separating fixated pixels from negatives
    (fixations borrowed from other frames or videos). Ties count one half.

    Points are FixationPoints or (row, col) pairs."""
    if len(pos_fixations) == 0 or len(neg_fixations) == 0:
        raise ValidationError("s-AUC needs positive and negative fixations")
    p = _arr(pred)
    pos = p[_pixels(pos_fixations, p.shape)]
    neg = np.sort(p[_pixels(neg_fixations, p.shape)])
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    return float((below.sum() + 0.5 * (upto - below).sum()) / (pos.size * neg.size))


def pool_negatives(fixations_by_video: Mapping[str, Sequence[FixationPoint]], exclude: str,
                   count: int, seed: int) -> list:
    """Sample ``count`` fixations from every video except ``exclude`` (without
    replacement when the pool is large enough)."""
    pool = [p for vid, pts in sorted(fixations_by_video.items()) if vid != exclude for p in pts]
    if not pool:
        raise DataError(f"no fixations outside video {exclude!r} to draw negatives from")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=count, replace=count > len(pool))
    return [pool[i] for i in idx]


def binarize(x, threshold: float = 0.5) -> np.ndarray:
    a = _arr(x)
    return a >= threshold * a.max()


def f_beta(pred, gt_binary, threshold: float = 0.5, beta2: float = 1.0) -> float:
    """F-measure of the prediction binarized at ``threshold * max(pred)``."""
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    p = binarize(pred, threshold)
    g = np.asarray(gt_binary, dtype=bool)
    if p.shape != g.shape:
        raise ValidationError(f"map shapes differ: {p.shape} vs {g.shape}")
    if not g.any():
        raise ValidationError("ground-truth map is empty")
    tp = np.count_nonzero(p & g)
    precision = tp / max(np.count_nonzero(p), 1)
    recall = tp / np.count_nonzero(g)
    if precision + recall == 0:
        return 0.0
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


# --- frame selection ------------------------------------------------------

def important_frames(gt_maps: Sequence, threshold: float = KLD_THRESHOLD, window: int = WINDOW) -> list:
    """Disjoint ``window``-frame runs whose attention departs from the clip average.

    A frame qualifies when KL(frame || average) >= ``threshold``; maximal runs
    of qualifying frames are cut into consecutive windows from the left and a
    short remainder is discarded."""
    if len(gt_maps) < window:
        raise ValidationError(f"need at least {window} frames, got {len(gt_maps)}")
    maps = [_arr(m) for m in gt_maps]
    avg = np.mean(maps, axis=0)
    marked = [kld(avg, m) >= threshold for m in maps]
    out, run = [], []
    for t, ok in enumerate(marked + [False]):
        if ok:
            run.append(t)
            continue
        for i in range(0, len(run) - window + 1, window):
            out.append(tuple(run[i:i + window]))
        run = []
    return out


def filter_irrelevant(seq: FixationSequence, irrelevant_masks: Sequence[np.ndarray],
                      max_fraction: float = MAX_IRRELEVANT) -> bool:
    """True when at most ``max_fraction`` of the fixations land on irrelevant pixels."""
    if not seq.points:
        raise ValidationError("empty fixation sequence")
    hits = 0
    for p in seq.points:
        if not 0 <= p.frame_index < len(irrelevant_masks):
            raise ValidationError(f"fixation frame {p.frame_index} has no mask")
        mask = np.asarray(irrelevant_masks[p.frame_index])
        r, c = _pixels([p], mask.shape)
        if not (0 <= p.y < mask.shape[0] and 0 <= p.x < mask.shape[1]):
            raise ValidationError(f"fixation ({p.x}, {p.y}) outside mask of shape {mask.shape}")
        hits += bool(mask[r[0], c[0]])
    return hits / len(seq.points) <= max_fraction


# --- reports ---------------------------------------------------------------

METRICS = ("kld", "cc", "sauc", "f_beta")


@dataclass
class FrameMetrics:
    video_id: str
    frame: int
    kld: float
    cc: Optional[float]
    sauc: float
    f_beta: float


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)
    seed: int = 0
    threshold: float = 0.5

    def aggregate(self) -> dict:
        out = {}
        for name in METRICS:
            vals = [getattr(f, name) for f in self.frames if getattr(f, name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    @property
    def counts(self) -> dict:
        return {"frames": len(self.frames),
                "cc_undefined": sum(f.cc is None for f in self.frames)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video_id", "frame", *METRICS])
        for f in self.frames:
            w.writerow([f.video_id, f.frame] + ["" if getattr(f, k) is None else repr(getattr(f, k))
                                                for k in METRICS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"aggregate": self.aggregate(), "counts": self.counts, "seed": self.seed,
               "f_beta_threshold": self.threshold}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def evaluate_frame(pred, gt, positives: Sequence, negatives: Sequence, video_id: str = "",
                   frame: int = 0, threshold: float = 0.5) -> FrameMetrics:
    try:
        corr = cc(pred, gt)
    except NumericalError:
        corr = None
    return FrameMetrics(video_id, frame, kld(pred, gt), corr, sauc(pred, positives, negatives),
                        f_beta(pred, binarize(gt, threshold), threshold))


# --- eye-data preprocessing --------------------------------------------------

MISSING_GATE = 0.20
ABNORMAL_GATE = 0.40


@dataclass(frozen=True)
class RawGazeRecord:
    """One recorded sequence: timestamps plus named per-sample features, NaN where missing."""
    timestamps: np.ndarray
    features: dict
    sequence_id: str = ""

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if ts.ndim != 1 or ts.size == 0:
            raise ValidationError("timestamps must be a nonempty vector")
        if np.any(np.diff(ts) < 0):
            raise ValidationError("timestamps must be nondecreasing")
        feats = {}
        for k, v in self.features.items():
            v = np.asarray(v, dtype=float)
            if v.shape != ts.shape:
                raise ValidationError(f"feature {k!r} has {v.shape} samples, expected {ts.shape}")
            feats[k] = v
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "features", feats)

    def missing(self, name: str) -> np.ndarray:
        return ~np.isfinite(self.features[name])


@dataclass
class GazeReport:
    interpolated: list = field(default_factory=list)  # (sequence_id, feature, n_filled)
    flagged: list = field(default_factory=list)       # (sequence_id, feature, missing fraction)
    abnormal: dict = field(default_factory=dict)      # sequence_id -> abnormal fraction
    dropped: list = field(default_factory=list)
    kept: int = 0


def interpolate_missing(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Linear interpolation over missing samples; ends take the nearest valid value."""
    ok = np.isfinite(v)
    if not ok.any():
        raise DataError("feature has no valid samples")
    out = v.copy()
    out[~ok] = np.interp(t[~ok], t[ok], v[ok])
    return out


def abnormal_mask(v: np.ndarray, k: float = 3.0) -> np.ndarray:
    """Samples outside mean +- k std, statistics taken over valid nonzero samples
    (population std). Zeros and missing samples are never marked here."""
    valid = np.isfinite(v) & (v != 0)
    if not valid.any():
        return np.zeros(v.shape, dtype=bool)
    mu, sd = v[valid].mean(), v[valid].std()
    return valid & ((v < mu - k * sd) | (v > mu + k * sd))


def preprocess_gaze(records: Sequence[RawGazeRecord], missing_gate: float = MISSING_GATE,
                    abnormal_gate: float = ABNORMAL_GATE):
    """Interpolate sparse gaps, mark 3-sigma outliers and drop mostly-abnormal sequences.

    Returns (kept records, report). A sample counts as abnormal when any of
    its features is an outlier or is still missing after the gap gate."""
    if not records:
        raise ValidationError("no gaze records")
    report = GazeReport()
    kept = []
    for i, rec in enumerate(records):
        sid = rec.sequence_id or str(i)
        feats = {}
        bad = np.zeros(rec.timestamps.shape, dtype=bool)
        for name, v in rec.features.items():
            miss = ~np.isfinite(v)
            if miss.all():
                raise DataError(f"sequence {sid}: feature {name!r} is entirely missing")
            frac = miss.mean()
            if miss.any() and frac < missing_gate:
                v = interpolate_missing(rec.timestamps, v)
                report.interpolated.append((sid, name, int(miss.sum())))
            elif miss.any():
                report.flagged.append((sid, name, float(frac)))
            bad |= abnormal_mask(v) | ~np.isfinite(v)
            feats[name] = v
        frac_bad = float(bad.mean())
        report.abnormal[sid] = frac_bad
        if frac_bad > abnormal_gate:
            report.dropped.append(sid)
            continue
        kept.append(RawGazeRecord(rec.timestamps, feats, rec.sequence_id))
    report.kept = len(kept)
    return kept, report
