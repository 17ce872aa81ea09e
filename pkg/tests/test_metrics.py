import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from medirl.errors import DataError, NumericalError, ValidationError
from medirl.grid import FixationPoint, FixationSequence
from medirl.metrics import (FrameMetrics, MetricReport, RawGazeRecord, abnormal_mask, binarize, cc,
                            evaluate_frame, f_beta, filter_irrelevant, important_frames, interpolate_missing,
                            kld, pool_negatives, preprocess_gaze, sauc)

from oracles import dense_kld, pairwise_auc


def _norm(x):
    x = np.asarray(x, dtype=float)
    return x / x.sum()


positive_maps = arrays(float, (4, 5), elements=st.floats(1e-6, 10)).map(_norm)


# --- KLD --------------------------------------------------------------------------

def test_kld_identity(rng):
    P = _norm(rng.random((6, 7)))
    assert abs(kld(P, P)) < 1e-9


def test_kld_delta_against_uniform():
    gt = np.zeros((4, 4))
    gt[1, 2] = 1
    assert kld(np.full((4, 4), 1 / 16), gt) == pytest.approx(np.log(16), abs=1e-9)
    assert np.log(16) == pytest.approx(2.7726, abs=1e-4)


def test_kld_matches_loop_oracle(rng):
    P, Q = _norm(rng.random((5, 5))), _norm(rng.random((5, 5)))
    assert kld(P, Q) == pytest.approx(dense_kld(P, Q), abs=1e-12)


def test_kld_requires_probability_maps():
    with pytest.raises(ValidationError):
        kld(np.ones((2, 2)), np.full((2, 2), 0.25))
    with pytest.raises(ValidationError):
        kld(np.full((2, 2), 0.25), np.full((3, 3), 1 / 9))


@settings(max_examples=300, deadline=None)
@given(positive_maps, positive_maps)
def test_kld_is_nonnegative(P, Q):
    assert kld(P, Q) >= -1e-12


# --- CC -----------------------------------------------------------------------------

def test_cc_identity_and_affine(rng):
    G = _norm(rng.random((6, 6)))
    assert cc(G, G) == pytest.approx(1.0, abs=1e-9)
    assert cc(_norm(3.0 * G + 0.2), G) == pytest.approx(1.0, abs=1e-9)


def test_cc_complement_is_minus_one():
    G = _norm([[1.0, 3.0], [3.0, 1.0]])
    comp = _norm(G.max() - G)
    assert cc(comp, G) == pytest.approx(-1.0, abs=1e-12)


def test_cc_constant_map_is_undefined():
    with pytest.raises(NumericalError):
        cc(np.full((3, 3), 1 / 9), _norm(np.arange(1, 10.0).reshape(3, 3)))


@given(positive_maps, positive_maps, st.floats(0.01, 100), st.floats(-5, 5))
def test_cc_symmetric_and_affine_invariant(P, Q, a, b):
    if np.ptp(P) < 1e-9 or np.ptp(Q) < 1e-9:
        return
    assert cc(P, Q) == pytest.approx(cc(Q, P), abs=1e-12)
    assert cc(a * P + b, Q) == pytest.approx(cc(P, Q), abs=1e-9)


# --- s-AUC -------------------------------------------------------------------------

def test_sauc_uniform_is_one_half():
    pos = [(0, 0), (1, 1), (2, 3)]
    neg = [(3, 3), (0, 2)]
    assert sauc(np.full((4, 4), 1 / 16), pos, neg) == 0.5


def test_sauc_hand_counted_pairs():
    m = np.zeros((2, 4))
    m[0] = [0.9, 0.8, 0.7, 0.1]
    m[1] = [0.9, 0.4, 0.7, 0.1]
    neg = [(0, 2), (0, 3)]
    assert sauc(m, [(0, 0), (0, 1)], neg) == 1.0
    assert sauc(m, [(1, 0), (1, 1)], [(1, 2), (1, 3)]) == 0.75


def test_sauc_accepts_fixation_points():
    m = np.array([[0.0, 1.0], [0.5, 0.2]])
    pos = [FixationPoint(x=1.7, y=0.2)]
    assert sauc(m, pos, [(1, 0), (1, 1)]) == 1.0
    with pytest.raises(ValidationError):
        sauc(m, [], [(0, 0)])


@settings(max_examples=300, deadline=None)
@given(arrays(float, (5, 5), elements=st.floats(0, 1)), st.data())
def test_sauc_is_a_probability_and_matches_pair_count(m, data):
    cells = st.tuples(st.integers(0, 4), st.integers(0, 4))
    pos = data.draw(st.lists(cells, min_size=1, max_size=8))
    neg = data.draw(st.lists(cells, min_size=1, max_size=8))
    value = sauc(m, pos, neg)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(pairwise_auc([m[p] for p in pos], [m[q] for q in neg]), abs=1e-12)


@given(arrays(float, (4, 4), elements=st.integers(0, 100).map(lambda k: k / 100)), st.data())
def test_sauc_invariant_to_monotone_transforms(m, data):
    cells = st.tuples(st.integers(0, 3), st.integers(0, 3))
    pos = data.draw(st.lists(cells, min_size=1, max_size=6))
    neg = data.draw(st.lists(cells, min_size=1, max_size=6))
    assert sauc(np.exp(3 * m) - 2, pos, neg) == sauc(m, pos, neg)


def test_pool_negatives_excludes_own_video():
    pts = {"a": [FixationPoint(1, 1)] * 3, "b": [FixationPoint(2, 2), FixationPoint(3, 3)]}
    neg = pool_negatives(pts, "a", 20, seed=5)
    assert len(neg) == 20 and all(p.x in (2, 3) for p in neg)
    assert neg == pool_negatives(pts, "a", 20, seed=5)
    with pytest.raises(DataError):
        pool_negatives({"a": pts["a"]}, "a", 3, 0)


# --- F-beta ------------------------------------------------------------------------

def test_f_beta_examples():
    gt = np.array([[1, 0], [0, 1]], dtype=bool)
    assert f_beta(np.where(gt, 0.5, 0.0), gt) == 1.0
    assert f_beta(np.where(gt, 0.0, 0.5), gt) == 0.0
    pred = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert f_beta(pred, gt) == pytest.approx(2 / 3)
    with pytest.raises(ValidationError):
        f_beta(pred, np.zeros((2, 2), dtype=bool))


@given(arrays(float, (4, 4), elements=st.floats(0, 1)), arrays(bool, (4, 4)))
def test_f_beta_range(pred, gt):
    if not gt.any():
        return
    assert 0.0 <= f_beta(pred, gt) <= 1.0


def test_binarize_relative_to_max():
    assert binarize(np.array([0.1, 0.5, 1.0])).tolist() == [False, True, True]


# --- frame gates -----------------------------------------------------------------

def _delta(shape, r, c):
    m = np.zeros(shape)
    m[r, c] = 1.0
    return m


def test_important_frames_constant_video():
    m = _norm(np.arange(1, 17.0).reshape(4, 4))
    assert important_frames([m] * 9) == []


def test_important_frames_finds_constructed_window():
    broad = _norm(np.ones((8, 8)))
    deltas = [_delta((8, 8), r, c) for r, c in [(0, 0), (0, 7), (7, 0), (7, 7), (3, 0), (0, 4)]]
    maps = [broad] * 3 + deltas + [broad] * 3
    assert important_frames(maps) == [(3, 4, 5, 6, 7, 8)]
    avg = np.mean(maps, axis=0)
    assert all(kld(avg, maps[t]) >= 0.89 for t in range(3, 9))
    assert all(kld(avg, maps[t]) < 0.89 for t in (0, 1, 2, 9, 10, 11))


def test_six_deltas_against_their_mixture():
    deltas = [_delta((6, 6), i, i) for i in range(6)]
    avg = np.mean(deltas, axis=0)
    assert kld(avg, deltas[0]) == pytest.approx(np.log(6), abs=1e-9)
    assert important_frames(deltas) == [tuple(range(6))]


def test_five_marked_frames_are_too_few():
    broad = _norm(np.ones((8, 8)))
    deltas = [_delta((8, 8), i, 7 - i) for i in range(5)]
    assert important_frames([broad] * 4 + deltas + [broad] * 4) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=6, max_size=30))
def test_important_windows_are_disjoint_and_full(marks):
    broad = _norm(np.ones((8, 8)))
    maps = [_delta((8, 8), i % 8, (3 * i) % 8) if m else broad for i, m in enumerate(marks)]
    windows = important_frames(maps)
    avg = np.mean(maps, axis=0)
    flat = [t for w in windows for t in w]
    assert len(flat) == len(set(flat))
    for w in windows:
        assert len(w) == 6 and list(w) == list(range(w[0], w[0] + 6))
        assert all(kld(avg, maps[t]) >= 0.89 for t in w)


def _seq(flags):
    pts = tuple(FixationPoint(x=float(9 if bad else 0), y=0.0) for bad in flags)
    return FixationSequence(pts, "d")


def test_filter_irrelevant_threshold():
    mask = np.zeros((1, 10))
    mask[0, 9] = 1
    assert filter_irrelevant(_seq([False] * 10), [mask])
    assert filter_irrelevant(_seq([True] * 4 + [False] * 6), [mask])
    assert not filter_irrelevant(_seq([True] * 5 + [False] * 5), [mask])
    with pytest.raises(ValidationError):
        filter_irrelevant(FixationSequence((FixationPoint(0, 0, frame_index=3),)), [mask])


# --- reports -----------------------------------------------------------------------

def test_report_handles_undefined_cc():
    rep = MetricReport([FrameMetrics("v", 0, 0.5, None, 0.7, 0.4), FrameMetrics("v", 1, 0.1, 0.8, 0.9, 0.6)], 3)
    agg = rep.aggregate()
    assert agg["cc"] == 0.8 and agg["kld"] == pytest.approx(0.3)
    assert rep.counts == {"frames": 2, "cc_undefined": 1}
    assert rep.to_csv().splitlines()[1] == "v,0,0.5,,0.7,0.4"
    assert json.loads(rep.to_json())["seed"] == 3


def test_evaluate_frame_self_comparison(rng):
    gt = _norm(rng.random((6, 8)))
    m = evaluate_frame(gt, gt, [(0, 0)], [(5, 7)])
    assert m.kld == pytest.approx(0, abs=1e-9) and m.cc == pytest.approx(1) and m.f_beta == 1.0


# --- gaze preprocessing ---------------------------------------------------------

def test_clean_records_pass_through():
    rec = RawGazeRecord(np.arange(5.0), {"x": np.arange(1, 6.0)}, "s")
    kept, rep = preprocess_gaze([rec])
    np.testing.assert_array_equal(kept[0].features["x"], rec.features["x"])
    assert rep.kept == 1 and not rep.interpolated and not rep.dropped


def test_three_sigma_rule_by_hand():
    v = np.array([1, 2, 3, 4, 100.0])
    mu, sd = v.mean(), v.std()
    assert mu == 22.0 and sd == pytest.approx(38.9, abs=0.15) and 100 < mu + 3 * sd
    assert not abnormal_mask(v).any()
    w = np.array([1, 2, 3, 4, 1000.0])
    assert w.mean() + 3 * w.std() == pytest.approx(1398.7, abs=0.5)
    assert not abnormal_mask(w).any()
    spike = np.random.default_rng(0).normal(size=100) + 5
    spike[40] = spike.mean() + 10
    assert abnormal_mask(spike).tolist() == [i == 40 for i in range(100)]


def test_sparse_gaps_are_interpolated():
    t = np.arange(10.0)
    x = t * 2 + 1
    x[7] = np.nan
    kept, rep = preprocess_gaze([RawGazeRecord(t, {"x": x}, "s")])
    np.testing.assert_allclose(kept[0].features["x"], t * 2 + 1)
    assert rep.interpolated == [("s", "x", 1)]
    x[3] = np.nan  # 20% is not below the gate
    _, rep = preprocess_gaze([RawGazeRecord(t, {"x": x}, "s")])
    assert rep.flagged == [("s", "x", 0.2)]


def test_dense_gaps_are_flagged_not_filled():
    t = np.arange(8.0)
    x = np.ones(8)
    x[[1, 4]] = np.nan
    kept, rep = preprocess_gaze([RawGazeRecord(t, {"x": x}, "s")])
    assert rep.flagged == [("s", "x", 0.25)] and not rep.interpolated
    assert np.isnan(kept[0].features["x"][1])


def test_mostly_abnormal_record_is_dropped():
    t = np.arange(10.0)
    x = np.ones(10)
    x[:5] = np.nan
    kept, rep = preprocess_gaze([RawGazeRecord(t, {"x": x}, "bad")])
    assert kept == [] and rep.dropped == ["bad"]


def test_gaze_validation():
    with pytest.raises(ValidationError):
        RawGazeRecord(np.array([1.0, 0.0]), {})
    with pytest.raises(DataError):
        preprocess_gaze([RawGazeRecord(np.arange(3.0), {"x": np.full(3, np.nan)})])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30), st.data())
def test_interpolation_stays_between_neighbours(values, data):
    v = np.array(values)
    t = np.arange(len(v), dtype=float)
    holes = data.draw(st.lists(st.integers(0, len(v) - 1), max_size=len(v) - 1))
    v[holes] = np.nan
    if not np.isfinite(v).any():
        return
    out = interpolate_missing(t, v)
    ok = np.flatnonzero(np.isfinite(v))
    for i in np.flatnonzero(~np.isfinite(v)):
        left = ok[ok < i]
        right = ok[ok > i]
        nb = [v[left[-1]]] if left.size else []
        nb += [v[right[0]]] if right.size else []
        assert min(nb) - 1e-9 <= out[i] <= max(nb) + 1e-9
