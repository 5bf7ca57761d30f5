import numpy as np
import pytest
from hypothesis import given, strategies as st

from switchpol.errors import FormatError, GeometryError
from switchpol.track import TrackGeometry, centerline_yaw_rates, to_frenet, wrap_angle


def test_straight_examples():
    tr = TrackGeometry.straight(100.0)
    f = to_frenet([5.0, 1.0, 0.1, 10, 0, 0], tr)
    assert (f.sigma, f.d_lat, f.phi) == pytest.approx((5.0, 1.0, 0.1), abs=1e-12)
    f = to_frenet([42.0, 0.0, 0.0, 10, 0, 0], tr)
    assert (f.sigma, f.d_lat, f.phi) == pytest.approx((42.0, 0.0, 0.0), abs=1e-12)


def test_circle_against_closed_form(rng):
    R = 40.0
    tr = TrackGeometry.circle_arc(R, np.pi)  # centre (0, R), counter-clockwise from the origin
    for _ in range(200):
        ang = rng.uniform(0.05, np.pi - 0.05)
        r = R + rng.uniform(-5, 5)
        px, py = r * np.sin(ang), R - r * np.cos(ang)
        psi = rng.uniform(-np.pi, np.pi)
        f = to_frenet([px, py, psi, 10, 0, 0], tr)
        assert f.sigma == pytest.approx(R * ang, abs=1e-9)
        assert f.d_lat == pytest.approx(R - r, abs=1e-9)
        assert f.phi == pytest.approx(wrap_angle(psi - ang), abs=1e-9)


def test_world_position_round_trip(rng):
    tr = TrackGeometry.sinusoidal(500.0, 0.02, 150.0, lead_in=10.0)
    sig = rng.uniform(0, tr.sigma_max, 300)
    d = rng.uniform(-3, 3, 300)
    px, py = tr.world_position(sig, d)
    s2, d2, _ = tr.frenet(px, py, np.zeros(300))
    np.testing.assert_allclose(s2, sig, atol=1e-9)
    x2, y2 = tr.world_position(s2, d2)
    np.testing.assert_allclose(x2, px, atol=1e-9)
    np.testing.assert_allclose(y2, py, atol=1e-9)


def test_yaw_rate_examples():
    st_ = TrackGeometry.straight(100.0)
    np.testing.assert_array_equal(centerline_yaw_rates([10, 0, 0, 10, 0, 0], st_), np.zeros(8))
    tr = TrackGeometry.circle_arc(50.0, 2.0)
    w = centerline_yaw_rates([0.0, 0.0, 0.0, 10.0, 0, 0], tr, sigma=5.0)
    np.testing.assert_allclose(w, [0.2] * 8, atol=1e-15)


def test_yaw_rates_piecewise_lookup(rng):
    lengths = [10.0, 5.0, 7.5, 20.0]
    curv = [0.0, 0.03, -0.01, 0.02]
    tr = TrackGeometry(lengths, curv)
    breaks = np.cumsum([0] + lengths)
    for _ in range(50):
        sig = rng.uniform(0, 38)
        vx = rng.uniform(5, 20)
        w = centerline_yaw_rates([0, 0, 0, vx, 0, 0], tr, sigma=sig)
        for k, la in enumerate((0.0, 1.0, 2.0, 3.0)):
            j = np.searchsorted(breaks, sig + la, side="right") - 1
            assert w[2 * k] == pytest.approx(curv[j] * vx, abs=1e-12)
            assert w[2 * k + 1] == pytest.approx(abs(curv[j] * vx), abs=1e-12)


def test_lookahead_past_end():
    tr = TrackGeometry.circle_arc(50.0, 1.0)
    with pytest.raises(GeometryError):
        centerline_yaw_rates([0, 0, 0, 10, 0, 0], tr, sigma=49.5)
    w = centerline_yaw_rates([0, 0, 0, 10, 0, 0], tr, sigma=49.5, clamp=True)
    np.testing.assert_allclose(w[0::2], 0.2)


def test_ambiguous_projection():
    # hairpin: two parallel legs 10 m apart joined by a half circle
    tr = TrackGeometry([50.0, 5.0 * np.pi, 50.0], [0.0, 0.2, 0.0])
    with pytest.raises(GeometryError):
        to_frenet([25.0, 5.0, 0.0, 10, 0, 0], tr)
    f = to_frenet([25.0, 2.0, 0.0, 10, 0, 0], tr)
    assert f.sigma == pytest.approx(25.0) and f.d_lat == pytest.approx(2.0)


def test_outside_corridor():
    with pytest.raises(GeometryError):
        to_frenet([5.0, 20.0, 0.0, 10, 0, 0], TrackGeometry.straight(100.0))


def test_track_serialization(tmp_path):
    tr = TrackGeometry.from_segments([{"type": "line", "length": 10},
                                      {"type": "clothoid", "length": 4, "curvature_start": 0,
                                       "curvature_end": 0.04, "n_arcs": 4},
                                      {"type": "arc", "length": 5, "curvature": 0.04}])
    assert tr.sigma_max == pytest.approx(19.0)
    np.testing.assert_allclose(tr.curvatures[1:5], [0.005, 0.015, 0.025, 0.035])
    tr.save(tmp_path / "t.json")
    tr2 = TrackGeometry.load(tmp_path / "t.json")
    np.testing.assert_array_equal(tr2.lengths, tr.lengths)
    np.testing.assert_allclose(tr2.pose(18.0), tr.pose(18.0), atol=1e-12)
    with pytest.raises(FormatError):
        TrackGeometry.from_segments([{"type": "spiral", "length": 3}])
    with pytest.raises(FormatError):
        TrackGeometry.from_segments([{"type": "arc", "length": 3}])


@given(st.floats(-20, 20, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-9) and np.isclose(np.sin(w), np.sin(a), atol=1e-9)
