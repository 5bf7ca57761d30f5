import re

import numpy as np
import pytest

from switchpol.bicycle import invert_inputs
from switchpol.core import PolicyParams, Trajectory
from switchpol.datagen import (FeatureSpec, ScenarioSpec, build_features, downsample, make_suite, read_trajectory,
                               simulate_closed_loop, simulate_linear_plant, write_trajectory)
from switchpol.errors import ArgumentError, FormatError, GenerationError, ParseError
from switchpol.track import TrackGeometry, centerline_yaw_rates, to_frenet

SIMPLE = FeatureSpec(state_features=("v_x", "v_y", "psi", "omega"), lookaheads=(), constant=False)


def _zero_policy(fspec, d=1):
    n = fspec.n_z
    return PolicyParams(np.zeros((d, 2, n)), np.zeros((d, 2)), np.array([np.eye(2) * 1e-4] * d),
                        np.zeros((d, n, d)))


def test_zero_policy_coasts_straight():
    tr = TrackGeometry.straight(500.0)
    traj = simulate_closed_loop(ScenarioSpec(tr, _zero_policy(SIMPLE), SIMPLE, T=120, noise=0.0))
    assert np.array_equal(traj.inputs, np.zeros((120, 2)))
    np.testing.assert_array_equal(traj.states[:, 1:], np.tile([0, 0, 12.0, 0, 0], (120, 1)))
    np.testing.assert_allclose(traj.states[:, 0], 12.0 * 0.05 * np.arange(120), atol=1e-12)


def test_generation_deterministic():
    a = make_suite("lane-change", seed=3, split=(2, 0, 0), T=150)
    b = make_suite("lane-change", seed=3, split=(2, 0, 0), T=150)
    for x, y in zip(a.train, b.train):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.inputs, y.inputs)
        assert np.array_equal(x.labels, y.labels) and np.array_equal(x.exogenous, y.exogenous)
    c = make_suite("lane-change", seed=4, split=(1, 0, 0), T=150)
    assert not np.array_equal(a.train[0].states, c.train[0].states)


def test_euler_pipeline_round_trip():
    s = make_suite("lane-keeping", seed=1, split=(1, 0, 0), T=400)
    traj = s.train[0]
    U = invert_inputs(traj.states, traj.dt, s.vehicle)
    assert np.abs(U - traj.inputs[:-1]).max() <= 1e-8


def test_gentle_policy_required():
    fs = SIMPLE
    p = _zero_policy(fs)
    p = p.replace(b=np.array([[0.0, 0.7]]))
    with pytest.raises(GenerationError):
        simulate_closed_loop(ScenarioSpec(TrackGeometry.straight(500.0), p, fs, T=120, noise=0.0))


def test_scenario_validation():
    tr = TrackGeometry.straight(500.0)
    with pytest.raises(ArgumentError):
        ScenarioSpec(tr, _zero_policy(SIMPLE), SIMPLE, T=50).validate()
    with pytest.raises(ArgumentError):
        ScenarioSpec(tr, _zero_policy(SIMPLE), SIMPLE, dt=0.0).validate()
    with pytest.raises(ArgumentError):
        ScenarioSpec(tr, _zero_policy(FeatureSpec()), SIMPLE).validate()


# -- features ---------------------------------------------------------------

def test_layout_arithmetic():
    assert SIMPLE.n_z == 2 + 4
    assert SIMPLE.slot_names()[:2] == ["a[t-1]", "delta[t-1]"]
    fs = FeatureSpec(t_u=2, t_x=1, n_exogenous=1)
    assert fs.n_z == 2 * 2 + 2 * (6 + 8) + 2 * 2
    assert len(fs.slot_names()) == fs.n_z
    with pytest.raises(ArgumentError):
        FeatureSpec(state_features=("speed",))


def test_constant_trajectory_gives_identical_rows():
    traj = Trajectory(np.tile([5.0, 0.0, 0.0, 10.0, 0.1, 0.02], (30, 1)), 0.05)
    seq = build_features(traj, np.tile([0.3, 0.01], (29, 1)), SIMPLE)
    assert np.all(seq.Z == seq.Z[0])
    np.testing.assert_array_equal(seq.Z[0], [0.3, 0.01, 10.0, 0.1, 0.0, 0.02])


def test_exhaustive_slot_audit(rng):
    track = TrackGeometry.sinusoidal(400.0, 0.02, 120.0, lead_in=10.0)
    T = 40
    sig = np.sort(rng.uniform(5, 380, T))
    px, py = track.world_position(sig, rng.uniform(-2, 2, T))
    X = np.column_stack([px, py, rng.uniform(-np.pi, np.pi, T), rng.uniform(5, 20, T), rng.normal(size=T),
                         rng.normal(size=T)])
    E = rng.normal(size=(T, 3))
    U = rng.normal(size=(T - 1, 2))
    fs = FeatureSpec(t_u=2, t_x=2, state_features=("v_x", "v_y", "psi", "omega", "sigma_norm", "d_lat", "phi",
                                                    "lat_err"), lookaheads=(0.0, 1.5), n_exogenous=2)
    seq = build_features(Trajectory(X, 0.05, exogenous=E), U, fs, track)
    assert seq.tau == 2 and seq.N == T - 1 - 2

    def source(name, t):
        base, k = re.fullmatch(r"(.+)\[t-(\d+)\]", name).groups()
        s = t - int(k)
        if base in ("a", "delta"):
            return U[s, ("a", "delta").index(base)]
        if base.startswith("exo"):
            return E[s, int(base[3:])]
        if base == "const":
            return 1.0
        st_ = X[s]
        f = to_frenet(st_, track)
        direct = {"v_x": st_[3], "v_y": st_[4], "psi": st_[2], "omega": st_[5], "sigma_norm": f.sigma / track.sigma_max,
                  "d_lat": f.d_lat, "phi": f.phi, "lat_err": f.d_lat - E[s, 0]}
        if base in direct:
            return direct[base]
        la = float(re.search(r"\((.+)\)", base).group(1))
        w = centerline_yaw_rates(st_, track, (la,), clamp=True)
        return w[1] if base.startswith("|") else w[0]

    names = fs.slot_names()
    for r in range(seq.N):
        t = r + 2
        assert np.array_equal(seq.U[r], U[t])
        for c, name in enumerate(names):
            assert seq.Z[r, c] == pytest.approx(source(name, t), abs=1e-12), (r, name)


def test_missing_track_or_exogenous():
    traj = Trajectory(np.tile([5.0, 0.0, 0.0, 10.0, 0.0, 0.0], (10, 1)), 0.05)
    with pytest.raises(ArgumentError):
        build_features(traj, np.zeros((9, 2)), FeatureSpec())
    with pytest.raises(ArgumentError):
        build_features(traj, np.zeros((9, 2)), FeatureSpec(state_features=("v_x",), lookaheads=(), n_exogenous=1))
    with pytest.raises(ArgumentError):
        build_features(traj, np.zeros((5, 2)), SIMPLE)


# -- downsampling -----------------------------------------------------------

def test_downsample(rng):
    X = rng.normal(size=(1001, 6))
    X[:, 3] = 10.0
    traj = Trajectory(X, 0.001, rng.normal(size=(1001, 2)), labels=rng.integers(3, size=1001))
    assert downsample(traj, 1) is traj
    ds = downsample(traj, 50)
    assert ds.T == int(np.ceil(1001 / 50)) and ds.dt == pytest.approx(0.05, abs=1e-15)
    np.testing.assert_array_equal(ds.states, X[np.arange(0, 1001, 50)])
    np.testing.assert_array_equal(ds.labels, traj.labels[::50])
    for bad in (0, -2, 1.5):
        with pytest.raises(ArgumentError):
            downsample(traj, bad)


# -- I/O --------------------------------------------------------------------

def test_trajectory_io_round_trip(tmp_path, rng):
    traj = Trajectory(rng.normal(size=(25, 6)) * 1e3, 0.05, rng.normal(size=(25, 2)), rng.normal(size=(25, 2)),
                      rng.integers(3, size=25), {"k": 1})
    write_trajectory(traj, tmp_path / "t.csv")
    back = read_trajectory(tmp_path / "t.csv")
    for name in ("states", "inputs", "exogenous", "labels"):
        assert np.abs(getattr(back, name) - getattr(traj, name)).max() <= 1e-15 * 1e3
    assert back.dt == traj.dt and back.meta == {"k": 1}


def test_io_errors(tmp_path):
    traj = Trajectory(np.ones((3, 6)), 0.05)
    p = tmp_path / "t.csv"
    write_trajectory(traj, p)
    lines = p.read_text().splitlines()
    p.write_text("")
    with pytest.raises(ParseError):
        read_trajectory(p)
    p.write_text("\n".join(["time,x"] + lines[1:]) + "\n")
    with pytest.raises(ParseError) as exc:
        read_trajectory(p)
    assert "t,p_X,p_Y,psi,v_x,v_y,omega" in str(exc.value)
    p.write_text("\n".join(lines[:2] + [lines[2].replace("1", "x", 1)]) + "\n")
    with pytest.raises(ParseError) as exc:
        read_trajectory(p)
    assert exc.value.row == 3
    (tmp_path / "t.json").unlink()
    with pytest.raises(FormatError):
        read_trajectory(p)


# -- sampler faithfulness ---------------------------------------------------

def test_single_mode_noise_covariance():
    Sigma = np.array([[0.5, 0.2], [0.2, 0.3]])
    K = np.array([[[0.2, 0.0, 0.3, 0.1], [0.0, -0.1, 0.2, 0.0]]])
    pol = PolicyParams(K, np.array([[0.1, -0.2]]), Sigma[None], np.zeros((1, 4, 1)))
    Z, U, _, _ = simulate_linear_plant(pol, [[0.5]], [[1.0, 0.0]], 100_000, seed=0)
    R = U - Z @ K[0].T - pol.b[0]
    emp = R.T @ R / len(R)
    assert np.all(np.abs(emp - Sigma) <= 0.05 * np.abs(Sigma))


def test_lane_change_suite_shape():
    s = make_suite("lane-change", seed=0, split=(2, 1, 1), T=150)
    assert (len(s.train), len(s.val), len(s.test)) == (2, 1, 1)
    seqs = s.sequences("train")
    assert seqs[0].Z.shape == (150 - 2, s.fspec.n_z) and seqs[0].layout == s.fspec.layout
    with pytest.raises(ArgumentError):
        make_suite("drift")
