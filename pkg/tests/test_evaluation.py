import json
import warnings

import numpy as np
import pytest

from switchpol.bicycle import invert_inputs, step_euler
from switchpol.core import MODE_DEPENDENT, PolicyParams, Trajectory
from switchpol.datagen import FeatureSpec, ScenarioSpec, feature_rows, make_suite, simulate_closed_loop
from switchpol.errors import ArgumentError
from switchpol.evaluation import (Dynamics, PredictionRun, baseline_cc, joint_prediction, mae, point_prediction,
                                  recursive_one_step, segment_eval, segments, trimmed_mean)
from switchpol.stability import lyapunov_matrix
from switchpol.track import TrackGeometry

FS = FeatureSpec(state_features=("v_x", "v_y", "psi", "d_lat"), lookaheads=(), constant=True)
TRACK = TrackGeometry.straight(800.0)
DYN = Dynamics()


def _speed_keeper(d=1, kind="general", theta=None):
    # a = 0.3 a_prev - 0.1 (v_x - 12), delta = 0.5 delta_prev - 0.01 d_lat - 0.05 psi
    K = np.zeros((d, 2, FS.n_z))
    K[:, 0, 0], K[:, 1, 1] = 0.3, 0.5
    K[:, 0, 2] = -0.1
    K[:, 1, 4], K[:, 1, 5] = -0.05, -0.01
    b = np.zeros((d, 2))
    b[:, 0] = 1.2
    b[:, 1] = 0.002 * np.arange(d)
    if theta is None:
        theta = np.zeros((d, FS.n_z, d)) if kind == "general" else np.zeros((d, d))
    return PolicyParams(K, b, np.array([np.diag([1e-2, 1e-5])] * d), theta, kind)


def _noise_free_traj(params, T=200, v0=10.0, seed=0):
    spec = ScenarioSpec(TRACK, params, FS, T=T, noise=0.0, seed=seed, v0=v0, sigma0=5.0)
    traj = simulate_closed_loop(spec)
    return traj, invert_inputs(traj.states, traj.dt, DYN.vehicle)


# -- metrics ----------------------------------------------------------------

def test_trimmed_mean_examples(rng):
    R = rng.normal(size=(20, 5, 3))
    np.testing.assert_allclose(trimmed_mean(R, 0.0), R.mean(axis=0), atol=1e-15)
    v = rng.permutation(np.arange(1.0, 101.0))
    assert trimmed_mean(v, 0.01) == pytest.approx(50.5, abs=1e-12)


def test_trimmed_mean_sort_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(3, 120))
        frac = rng.uniform(0, 0.3)
        R = rng.normal(size=(n, 4, 2))
        k = int(np.ceil(frac * n - 1e-12))
        if n - 2 * k < 1:
            continue
        ref = np.empty((4, 2))
        for i in range(4):
            for j in range(2):
                s = sorted(R[:, i, j])
                ref[i, j] = sum(s[k:n - k]) / (n - 2 * k)
        np.testing.assert_allclose(trimmed_mean(R, frac), ref, atol=1e-12)
        np.testing.assert_allclose(trimmed_mean(R[rng.permutation(n)], frac), ref, atol=1e-12)


def test_trimmed_mean_errors():
    with pytest.raises(ArgumentError):
        trimmed_mean(np.ones((1, 3)), 0.4)
    with pytest.raises(ArgumentError):
        trimmed_mean(np.ones((4, 3)), 0.5)
    with pytest.raises(ArgumentError):
        trimmed_mean(np.empty((0, 3)), 0.0)


def test_mae(rng):
    assert mae([1.0, 2.0], [1.0, 3.0]) == pytest.approx(0.5)
    A = rng.normal(size=(30, 6))
    np.testing.assert_array_equal(mae(A, A), np.zeros(6))
    B = rng.normal(size=(30, 6))
    ref = np.zeros(6)
    for i in range(6):
        for t in range(30):
            ref[i] += abs(A[t, i] - B[t, i])
        ref[i] /= 30
    np.testing.assert_allclose(mae(A, B), ref, atol=1e-15)
    with pytest.raises(ArgumentError):
        mae(A, B[:-1])


def test_segments():
    assert segments(200, 100) == [(0, 100), (100, 200)]
    assert segments(299, 100) == [(0, 100), (100, 200)]
    assert segments(99, 100) == []


def test_run_validation():
    for bad in (dict(mode="open-loop"), dict(horizon=0), dict(trim=0.5), dict(n_init=1),
                dict(segment_length=50)):
        with pytest.raises(ArgumentError):
            PredictionRun(**bad).validate(1)


# -- prediction -------------------------------------------------------------

def test_self_consistency_noise_free():
    p = _speed_keeper()
    traj, U = _noise_free_traj(p)
    win = traj.window(0, 100)
    truth = win.states[30:90]
    for fn in (recursive_one_step, joint_prediction):
        ro = fn(p, win, U[:100], FS, DYN, PredictionRun(posterior_mean=True), TRACK)
        assert np.abs(ro.states[0] - truth).max() <= 1e-9


def test_zero_policy_reproduces_coasting():
    x = np.array([0.0, 0.0, 0.0, 12.0, 0.0, 0.0])
    X = [x]
    for _ in range(99):
        X.append(step_euler(X[-1], [0.0, 0.0], 0.05, DYN.vehicle))
    traj = Trajectory(np.array(X), 0.05)
    U = np.zeros((99, 2))
    p = PolicyParams(np.zeros((1, 2, FS.n_z)), np.zeros((1, 2)), np.array([np.eye(2)]), np.zeros((1, FS.n_z, 1)))
    ro = recursive_one_step(p, traj, U, FS, DYN, PredictionRun(posterior_mean=True), TRACK)
    np.testing.assert_array_equal(ro.states[0], traj.states[30:90])
    np.testing.assert_array_equal(baseline_cc(traj, U, 30, 60, DYN), ro.states[0])


def test_cc_exact_under_constant_input():
    u = np.array([0.4, 0.02])
    X = [np.array([0.0, 0.0, 0.0, 10.0, 0.0, 0.0])]
    for _ in range(99):
        X.append(step_euler(X[-1], u, 0.05, DYN.vehicle))
    traj = Trajectory(np.array(X), 0.05)
    U = invert_inputs(traj.states, 0.05, DYN.vehicle)
    np.testing.assert_allclose(baseline_cc(traj, U, 30, 60, DYN), traj.states[30:90], atol=1e-9)


def test_sampled_rollouts_seed_determinism():
    p = _speed_keeper(d=2)
    traj, U = _noise_free_traj(p)
    win = traj.window(0, 100)
    run = PredictionRun(n_samples=20, seed=5)
    a = joint_prediction(p, win, U[:100], FS, DYN, run, TRACK)
    b = joint_prediction(p, win, U[:100], FS, DYN, run, TRACK)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.modes, b.modes)
    c = joint_prediction(p, win, U[:100], FS, DYN, PredictionRun(n_samples=20, seed=6), TRACK)
    assert not np.array_equal(a.states, c.states)


def test_deterministic_gate_gives_identical_rollouts():
    th = np.array([[800.0, -800.0], [800.0, -800.0]])  # always switch to mode 0
    p = _speed_keeper(d=2, kind=MODE_DEPENDENT, theta=th)
    p = p.replace(Sigma=np.array([1e-30 * np.eye(2)] * 2))
    traj, U = _noise_free_traj(_speed_keeper())
    ro = joint_prediction(p, traj.window(0, 100), U[:100], FS, DYN, PredictionRun(n_samples=10), TRACK)
    assert np.all(ro.modes == 0)
    np.testing.assert_allclose(ro.states, np.broadcast_to(ro.states[0], ro.states.shape), atol=1e-12, rtol=0)


def test_recursive_state_slots_are_ground_truth():
    p = _speed_keeper(d=2)
    traj, U = _noise_free_traj(p, seed=3)
    win = traj.window(0, 100)
    ro = recursive_one_step(p, win, U[:100], FS, DYN, PredictionRun(n_samples=7, seed=1), TRACK, audit=True)
    Fx, Fe = feature_rows(win.states[29:89], None, FS, TRACK)
    ref = np.hstack([Fx, Fe])
    for h in range(60):
        assert np.all(ro.z_state_slots[:, h] == ref[h])


def test_leaving_the_corridor_is_flagged():
    p = _speed_keeper().replace(b=np.array([[1.2, 0.3]]))
    traj, U = _noise_free_traj(_speed_keeper())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ro = joint_prediction(p, traj.window(0, 100), U[:100], FS, DYN, PredictionRun(n_samples=3), TRACK)
    assert ro.truncated == [0, 1, 2]
    assert np.isnan(ro.states[:, -1]).all() and not np.isnan(ro.states[:, 0]).any()
    assert any("truncated" in str(w.message) for w in caught)


def test_mode_dependent_input_offset_contracts():
    # the same mode mixture drives both runs, so only the input recursion differs
    s = make_suite("lane-keeping", seed=0, split=(0, 0, 1), T=400)
    g = s.generator
    K = g.K.copy()
    K[:, 0, 1] = [0.2, -0.3, 0.0]
    K[:, 1, 0] = [0.0, 0.1, -0.2]
    p = PolicyParams(K, g.b, g.Sigma, np.array([[2.0, -1, -1], [-1, 2, -1], [-1, -1, 2]]), MODE_DEPENDENT)
    P = np.eye(2)
    assert all(np.linalg.eigvalsh(lyapunov_matrix(K[i][:, :2], P))[-1] < 0 for i in range(3))
    traj = s.test[0]
    U = s.estimated_inputs(traj)
    run = PredictionRun(mode="recursive-one-step", posterior_mean=True)
    for a in range(0, 300, 100):
        win, Uw = traj.window(a, a + 100), U[a:a + 100]
        r1 = recursive_one_step(p, win, Uw, s.fspec, DYN, run, s.track)
        r2 = recursive_one_step(p, win, Uw, s.fspec, DYN, run, s.track, u0=[-1.5, -0.04])
        D = r1.inputs[0] - r2.inputs[0]
        e = np.sqrt(np.einsum("ha,ab,hb->h", D, P, D))
        assert e[0] > 0 and np.all(np.diff(e) <= 1e-12 * e[:-1])


def test_segment_eval_generator_near_zero(tmp_path):
    p = _speed_keeper()
    traj, U = _noise_free_traj(p, T=210)
    table = segment_eval({"truth": p, "CC": "CC"}, [traj], [U], FS, DYN, PredictionRun(posterior_mean=True), TRACK)
    assert table.per_segment["truth"].shape == (2, 6)
    assert table.row("truth").max() <= 1e-9
    assert table.row("CC")[3] > table.row("truth")[3]  # straight run: only v_x moves
    table.to_csv(tmp_path / "m.csv")
    table.to_json(tmp_path / "m.json")
    assert (tmp_path / "m.csv").read_text().splitlines()[0].startswith("method,p_X_mean")
    assert json.loads((tmp_path / "m.json").read_text())["methods"] == ["truth", "CC"]


def test_point_prediction_excludes_truncated(rng):
    from switchpol.evaluation import Rollouts
    S = rng.normal(size=(5, 4, 6))
    S[2, 1:] = np.nan
    ro = Rollouts(S, np.zeros((5, 4, 2)), np.zeros((5, 4), int), [2])
    np.testing.assert_allclose(point_prediction(ro, 0.0), S[[0, 1, 3, 4]].mean(axis=0))
