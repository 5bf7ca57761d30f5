"""Centerline geometry built from constant-curvature pieces, and Frenet
coordinates relative to it.

A track is a chain of arcs (lines are arcs with zero curvature) starting at a
given pose.  Clothoids are approximated by a run of short arcs whose
curvature steps linearly between the endpoint values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, GeometryError

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, TWO_PI) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class FrenetState:
    sigma: float
    d_lat: float
    phi: float


def _arc_point(x0, y0, h0, kappa, s):
    """Pose after travelling ``s`` along an arc that starts at (x0, y0, h0)."""
    h = h0 + kappa * s
    small = np.abs(kappa * s) < 1e-9
    k_safe = np.where(kappa == 0.0, 1.0, kappa)
    dx = np.where(small, s * np.cos(h0 + 0.5 * kappa * s), (np.sin(h) - np.sin(h0)) / k_safe)
    dy = np.where(small, s * np.sin(h0 + 0.5 * kappa * s), (np.cos(h0) - np.cos(h)) / k_safe)
    return x0 + dx, y0 + dy, h


class TrackGeometry:
    """Arc-length parameterized centerline with piecewise-constant curvature.

    ``lengths`` and ``curvatures`` describe consecutive arcs.  Lookups are
    vectorized over arrays of arc length.
    """

    def __init__(self, lengths, curvatures, lane_width=4.5, start=(0.0, 0.0, 0.0),
                 corridor=10.0, sample_spacing=0.5):
        lengths = np.asarray(lengths, dtype=float)
        curvatures = np.asarray(curvatures, dtype=float)
        if lengths.ndim != 1 or lengths.shape != curvatures.shape or lengths.size == 0:
            raise GeometryError("need matching nonempty lengths and curvatures")
        if np.any(lengths <= 0):
            raise GeometryError("segment lengths must be positive")
        self.lengths = lengths
        self.curvatures = curvatures
        self.lane_width = float(lane_width)
        self.corridor = float(corridor)
        self.breaks = np.concatenate([[0.0], np.cumsum(lengths)])
        self.sigma_max = float(self.breaks[-1])
        n = lengths.size
        self._x0 = np.empty(n)
        self._y0 = np.empty(n)
        self._h0 = np.empty(n)
        x, y, h = (float(v) for v in start)
        for j in range(n):
            self._x0[j], self._y0[j], self._h0[j] = x, y, h
            x, y, h = (float(v) for v in _arc_point(x, y, h, curvatures[j], lengths[j]))
        self.start = tuple(float(v) for v in start)
        m = max(2, int(np.ceil(self.sigma_max / sample_spacing)) + 1)
        self._samples_sigma = np.linspace(0.0, self.sigma_max, m)
        sx, sy, _ = self.pose(self._samples_sigma)
        self._samples_seg = self.segment_index(self._samples_sigma)
        self._tree = cKDTree(np.column_stack([sx, sy]))
        self._spacing = self.sigma_max / (m - 1)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def straight(cls, length, **kw):
        return cls([length], [0.0], **kw)

    @classmethod
    def circle_arc(cls, radius, angle, **kw):
        return cls([radius * angle], [1.0 / radius], **kw)

    @classmethod
    def from_segments(cls, segments, lane_width=4.5, start=(0.0, 0.0, 0.0), **kw):
        """Build from a list of dicts with ``type`` in {line, arc, clothoid}."""
        lengths, curv = [], []
        for k, seg in enumerate(segments):
            try:
                kind = seg["type"]
                length = float(seg["length"])
                if kind == "line":
                    lengths.append(length)
                    curv.append(0.0)
                elif kind == "arc":
                    lengths.append(length)
                    curv.append(float(seg["curvature"]))
                elif kind == "clothoid":
                    k0, k1 = float(seg["curvature_start"]), float(seg["curvature_end"])
                    n = int(seg.get("n_arcs", max(1, int(np.ceil(length)))))
                    ends = np.linspace(k0, k1, n + 1)
                    lengths.extend([length / n] * n)
                    curv.extend(0.5 * (ends[:-1] + ends[1:]))
                else:
                    raise FormatError(f"segment {k}: unknown type {kind!r}")
            except KeyError as exc:
                raise FormatError(f"segment {k}: missing key {exc}") from None
        return cls(lengths, curv, lane_width=lane_width, start=start, **kw)

    @classmethod
    def sinusoidal(cls, length, amplitude, wavelength, piece=1.0, lead_in=0.0, **kw):
        """Track whose curvature follows ``amplitude * sin(2 pi s / wavelength)``,
        sampled at piece midpoints, optionally after a straight lead-in."""
        n = int(np.ceil(length / piece))
        mids = (np.arange(n) + 0.5) * piece
        lengths = [piece] * n
        curv = list(amplitude * np.sin(TWO_PI * mids / wavelength))
        if lead_in > 0:
            lengths = [lead_in] + lengths
            curv = [0.0] + curv
        return cls(lengths, curv, **kw)

    def to_dict(self):
        return {
            "lane_width": self.lane_width,
            "start": list(self.start),
            "corridor": self.corridor,
            "segments": [{"type": "arc", "length": float(l), "curvature": float(k)}
                         for l, k in zip(self.lengths, self.curvatures)],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls.from_segments(doc["segments"], lane_width=doc.get("lane_width", 4.5),
                                     start=tuple(doc.get("start", (0.0, 0.0, 0.0))),
                                     corridor=doc.get("corridor", 10.0))
        except KeyError as exc:
            raise FormatError(f"track document missing {exc}") from None

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    # -- lookups ---------------------------------------------------------------

    def segment_index(self, sigma):
        j = np.searchsorted(self.breaks, sigma, side="right") - 1
        return np.clip(j, 0, self.lengths.size - 1)

    def pose(self, sigma):
        """Centerline ``(x, y, heading)`` at arc length ``sigma``."""
        sigma = np.asarray(sigma, dtype=float)
        j = self.segment_index(sigma)
        s = sigma - self.breaks[j]
        return _arc_point(self._x0[j], self._y0[j], self._h0[j], self.curvatures[j], s)

    def curvature(self, sigma):
        return self.curvatures[self.segment_index(np.asarray(sigma, dtype=float))]

    def world_position(self, sigma, d_lat):
        """Inverse of the Frenet projection for the position components."""
        x, y, h = self.pose(sigma)
        return x - d_lat * np.sin(h), y + d_lat * np.cos(h)

    # -- projection ------------------------------------------------------------

    def _project_on_segment(self, j, px, py):
        """Closest point on segment(s) ``j``: returns (sigma, distance)."""
        x0, y0, h0 = self._x0[j], self._y0[j], self._h0[j]
        k = self.curvatures[j]
        L = self.lengths[j]
        straight = np.abs(k) < 1e-12
        # line
        s_line = (px - x0) * np.cos(h0) + (py - y0) * np.sin(h0)
        # arc: centre sits on the left normal at distance 1/k
        k_safe = np.where(straight, 1.0, k)
        cx = x0 - np.sin(h0) / k_safe
        cy = y0 + np.cos(h0) / k_safe
        ang = np.arctan2(py - cy, px - cx)
        heading = np.where(k > 0, ang + 0.5 * np.pi, ang - 0.5 * np.pi)
        delta = wrap_angle(heading - h0 - 0.5 * k * L) + 0.5 * k * L
        s_arc = delta / k_safe
        s = np.where(straight, s_line, s_arc)
        s = np.clip(s, 0.0, L)
        qx, qy, _ = _arc_point(x0, y0, h0, k, s)
        dist = np.hypot(px - qx, py - qy)
        return self.breaks[j] + s, dist

    def project(self, px, py):
        """Nearest centerline arc length for arrays of points.

        Returns ``(sigma, distance)``.  Raises GeometryError for points
        outside the corridor.
        """
        px = np.atleast_1d(np.asarray(px, dtype=float))
        py = np.atleast_1d(np.asarray(py, dtype=float))
        _, idx = self._tree.query(np.column_stack([px, py]))
        j0 = self._samples_seg[idx]
        best_s = np.full(px.shape, np.nan)
        best_d = np.full(px.shape, np.inf)
        nseg = self.lengths.size
        # neighbours cover arcs shorter than the sample spacing
        reach = int(np.ceil(self._spacing / self.lengths.min())) + 1
        for off in range(-reach, reach + 1):
            j = np.clip(j0 + off, 0, nseg - 1)
            s, dist = self._project_on_segment(j, px, py)
            better = dist < best_d
            best_s = np.where(better, s, best_s)
            best_d = np.where(better, dist, best_d)
        if np.any(best_d > self.corridor):
            raise GeometryError(f"point farther than {self.corridor} m from the centerline")
        return best_s, best_d

    def frenet(self, px, py, psi):
        """Vectorized Frenet coordinates ``(sigma, d_lat, phi)``."""
        sigma, _ = self.project(px, py)
        x, y, h = self.pose(sigma)
        d_lat = -(np.atleast_1d(px) - x) * np.sin(h) + (np.atleast_1d(py) - y) * np.cos(h)
        phi = wrap_angle(np.atleast_1d(psi) - h)
        return sigma, d_lat, np.atleast_1d(phi)

    def check_unique_projection(self, px, py, tol=1e-6):
        """Raise GeometryError when two separate parts of the track are
        (nearly) equally close to the point."""
        idx = self._tree.query_ball_point([px, py], self.corridor)
        if not idx:
            raise GeometryError(f"point farther than {self.corridor} m from the centerline")
        sig = np.sort(self._samples_sigma[idx])
        gaps = np.flatnonzero(np.diff(sig) > 2.5 * self._spacing)
        if gaps.size == 0:
            return
        groups = np.split(sig, gaps + 1)
        dists = []
        for g in groups:
            j = np.unique(self.segment_index(g))
            j = np.unique(np.clip(np.concatenate([j - 1, j, j + 1]), 0, self.lengths.size - 1))
            _, dist = self._project_on_segment(j, np.full(j.shape, px), np.full(j.shape, py))
            dists.append(dist.min())
        dists = np.sort(dists)
        if dists[1] - dists[0] <= tol:
            raise GeometryError("ambiguous projection: two track sections are equally close")


def to_frenet(state, track: TrackGeometry) -> FrenetState:
    """Frenet pose of a single vehicle state ``[p_X, p_Y, psi, ...]``."""
    state = np.asarray(state, dtype=float)
    track.check_unique_projection(state[0], state[1])
    s, d, phi = track.frenet(state[0], state[1], state[2])
    return FrenetState(float(s[0]), float(d[0]), float(phi[0]))


def centerline_yaw_rates(state, track: TrackGeometry, lookaheads=(0.0, 1.0, 2.0, 3.0), clamp=False,
                         sigma=None):
    """Centerline yaw rate ``kappa(sigma + l) * v_x`` and its magnitude for each
    lookahead ``l``, interleaved as ``(w_0, |w_0|, w_1, |w_1|, ...)``.

    Works on a single state or a batch ``(B, 6)``; ``sigma`` may be passed to
    skip the projection.
    """
    state = np.asarray(state, dtype=float)
    single = state.ndim == 1
    S = np.atleast_2d(state)
    if sigma is None:
        sigma, _ = track.project(S[:, 0], S[:, 1])
    sigma = np.atleast_1d(sigma)
    la = np.asarray(lookaheads, dtype=float)
    ahead = sigma[:, None] + la[None, :]
    if np.any(ahead > track.sigma_max):
        if not clamp:
            raise GeometryError("lookahead runs past the end of the track")
        ahead = np.minimum(ahead, track.sigma_max)
    w = track.curvature(ahead) * S[:, 3:4]
    out = np.empty((S.shape[0], 2 * la.size))
    out[:, 0::2] = w
    out[:, 1::2] = np.abs(w)
    return out[0] if single else out
