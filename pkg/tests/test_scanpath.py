import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medirl.episode import SceneStepper, StateConfig
from medirl.errors import ValidationError
from medirl.grid import FixationPoint, PatchIndex, build_grid, flatten, pool_patches
from medirl.mdp import build_mdp, soft_value_iteration
from medirl.rewardnet import RewardNetParams
from medirl.scanpath import (ARGMAX, SAMPLE, IoRConfig, SaliencyMap, apply_ior, fixations_to_map,
                             occupancy_map, policy_saliency, reward_map, rollout, to_pgm, write_saliency)
from medirl.ften import read_tensor
from medirl.synthetic import planted_params


@pytest.fixture
def model(scene, desk_grid):
    f = scene.frames[0]
    params = planted_params(f.X.shape[2], f.Y.shape[2])
    return params, build_mdp(desk_grid, gamma=0.98)


def test_saliency_map_contract():
    SaliencyMap(np.full((2, 2), 0.25))
    with pytest.raises(ValidationError):
        SaliencyMap(np.ones((2, 2)))
    with pytest.raises(ValidationError):
        SaliencyMap.normalized(np.zeros((2, 2)))
    assert SaliencyMap.normalized(np.array([[1.0, -1.0], [3.0, 0.0]])).values.tolist() == [[0.25, 0], [0.75, 0]]


def test_ior_config_validation():
    with pytest.raises(ValidationError):
        IoRConfig(decay=1.5)
    with pytest.raises(ValidationError):
        IoRConfig(memory=-1)


def test_apply_ior():
    p = np.array([0.5, 0.25, 0.25])
    np.testing.assert_allclose(apply_ior(p, [0], IoRConfig(decay=1.0)), p)
    np.testing.assert_allclose(apply_ior(p, [0], IoRConfig(decay=0.0)), [0, 0.5, 0.5])
    np.testing.assert_allclose(apply_ior(p, [0, 1], IoRConfig(decay=0.0, memory=1)), [2 / 3, 0, 1 / 3])
    np.testing.assert_allclose(apply_ior(p, [0, 1, 2], IoRConfig(decay=0.0)), p)


def test_rollout_without_inhibition_follows_the_raw_policy(model, scene, desk_grid):
    params, mdp = model
    K = 2
    path = rollout(params, scene, desk_grid, mdp, K, IoRConfig(decay=1.0), seed=4, mode=SAMPLE)
    states = path.flat_states(desk_grid)
    stepper = SceneStepper(scene, desk_grid, StateConfig())
    stepper.start(int(states[0]), 0)
    total = K * scene.num_frames - 1
    for u, step in enumerate(path.steps[1:]):
        r = reward_map(params, stepper.features(step.frame))
        pi = soft_value_iteration(mdp, r, horizon=total - u, t0=u).policy[0, states[u]]
        assert step.prob == pytest.approx(pi[states[u + 1]], rel=1e-12)
        stepper.fixate(int(states[u + 1]), step.frame)


def test_argmax_with_full_inhibition_never_revisits(model, scene, desk_grid):
    params, mdp = model
    path = rollout(params, scene, desk_grid, mdp, 5, IoRConfig(decay=0.0), seed=0, mode=ARGMAX)
    for f in range(scene.num_frames):
        patches = [s.patch for s in path.steps if s.frame == f]
        assert len(patches) == 5 and len(set(patches)) == 5


def test_rollout_determinism(model, scene, desk_grid):
    params, mdp = model
    a = rollout(params, scene, desk_grid, mdp, 3, seed=8, mode=SAMPLE)
    b = rollout(params, scene, desk_grid, mdp, 3, seed=8, mode=SAMPLE)
    assert a == b and a.to_csv() == b.to_csv()
    c = rollout(params, scene, desk_grid, mdp, 3, IoRConfig(decay=1.0), seed=1, mode=ARGMAX)
    d = rollout(params, scene, desk_grid, mdp, 3, IoRConfig(decay=1.0), seed=99, mode=ARGMAX)
    assert c.steps == d.steps


def test_rollout_shapes_and_probabilities(model, scene, desk_grid):
    params, mdp = model
    K = [1, 0, 2, 3, 1, 2]
    path = rollout(params, scene, desk_grid, mdp, K, seed=2)
    assert [sum(s.frame == f for s in path.steps) for f in range(6)] == K
    assert all(0 < s.prob <= 1 for s in path.steps)
    assert path.steps[0].patch == PatchIndex(3, 4)


def test_rollout_errors(model, scene, desk_grid):
    params, mdp = model
    with pytest.raises(ValidationError):
        rollout(params, scene, desk_grid, mdp, 0)
    with pytest.raises(ValidationError):
        rollout(params, scene, desk_grid, mdp, 2, mode="greedy")
    with pytest.raises(ValidationError):
        rollout(params, scene, desk_grid, build_mdp(build_grid(12, 17, 12, 17)), 2)
    narrow = RewardNetParams(params.config.__class__(3, (), False),
                             {"w_out": np.ones(3), "b_out": np.zeros(())}, {})
    with pytest.raises(ValidationError):
        rollout(narrow, scene, desk_grid, mdp, 2)


def test_uniform_reward_gives_uniform_patch_map():
    g = build_grid(24, 34, 12, 17)
    mdp = build_mdp(g)
    m = occupancy_map(g, mdp, np.zeros(4), np.eye(4)[0], horizon=3, sigma=0)
    np.testing.assert_allclose(pool_patches(g, m.values) * g.patch_areas, 0.25, atol=1e-12)


def test_peaked_reward_dominates_one_step_map():
    g = build_grid(24, 34, 12, 17)
    mdp = build_mdp(g)
    r = np.zeros(4)
    r[3] = 100.0
    m = occupancy_map(g, mdp, r, np.eye(4)[0], horizon=1, sigma=0)
    assert m.values[12:, 17:].sum() > 0.95


def test_policy_saliency_maps_are_normalized_and_shift_invariant(model, scene, desk_grid):
    params, mdp = model
    maps = policy_saliency(params, scene, desk_grid, mdp, 3)
    assert len(maps) == scene.num_frames
    for m in maps:
        assert m.shape == (desk_grid.frame_h, desk_grid.frame_w)
        assert abs(m.values.sum() - 1) < 1e-9 and m.values.min() >= 0
    shifted = RewardNetParams(params.config, {**params.tensors, "b_out": np.asarray(params.tensors["b_out"] + 4.0)},
                              params.buffers)
    for a, b in zip(maps, policy_saliency(shifted, scene, desk_grid, mdp, 3)):
        np.testing.assert_allclose(a.values, b.values, atol=1e-9)


def test_single_fixation_without_smoothing_is_a_delta():
    m = fixations_to_map([FixationPoint(4.7, 2.2)], (6, 8), sigma=0)
    assert m.values[2, 4] == 1.0 and m.values.sum() == 1.0


def test_equal_fixations_split_mass():
    pts = [FixationPoint(5, 5, 200), FixationPoint(55, 35, 200)]
    m = fixations_to_map(pts, (40, 60), sigma=2)
    assert m.values[:20, :30].sum() == pytest.approx(0.5, abs=1e-6)
    assert m.values[20:, 30:].sum() == pytest.approx(0.5, abs=1e-6)


def test_duration_weights():
    pts = [FixationPoint(5, 5, 100), FixationPoint(55, 35, 300)]
    m = fixations_to_map(pts, (40, 60), sigma=2)
    assert m.values[:20, :30].sum() == pytest.approx(0.25, abs=1e-6)
    assert m.values[20:, 30:].sum() == pytest.approx(0.75, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 59.9), st.floats(0, 39.9), st.sampled_from([0.0, 50.0, 120.0])),
                min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_fixation_map_is_order_free_and_normalized(raw, shuffler):
    pts = [FixationPoint(x, y, d) for x, y, d in raw]
    m = fixations_to_map(pts, (40, 60), sigma=3)
    shuffled = list(pts)
    shuffler.shuffle(shuffled)
    np.testing.assert_allclose(fixations_to_map(shuffled, (40, 60), sigma=3).values, m.values, atol=1e-15)
    assert abs(m.values.sum() - 1) < 1e-9 and m.values.min() >= 0


def test_exports(tmp_path):
    m = SaliencyMap.normalized(np.array([[0.0, 1.0, 2.0], [4.0, 1.0, 0.0]]))
    pgm = to_pgm(m)
    assert pgm.startswith(b"P5\n3 2\n255\n")
    assert list(pgm[-6:]) == [0, 64, 128, 255, 64, 0]
    write_saliency(tmp_path / "m.ften", m)
    np.testing.assert_array_equal(read_tensor(tmp_path / "m.ften"), m.values)


def test_scanpath_csv(model, scene, desk_grid):
    params, mdp = model
    path = rollout(params, scene, desk_grid, mdp, 1, seed=0)
    lines = path.to_csv().splitlines()
    assert lines[0] == "frame_index,step,row,col,prob" and len(lines) == 7
    assert lines[1] == "0,0,3,4,1.0"
    assert flatten(desk_grid, path.steps[0].patch) == path.flat_states(desk_grid)[0]
