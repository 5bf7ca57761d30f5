"""Synthetic closed-loop scenarios, history-vector assembly and trajectory I/O."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bicycle import INTEGRATORS, STATE_NAMES, INPUT_NAMES, VX, VehicleParams
from .core import (GENERAL, HistoryLayout, PolicyParams, Trajectory, gate_probs)
from .errors import (ArgumentError, FormatError, GenerationError, GeometryError, IntegrationError, ParseError)
from .inference import SupervisedSequence
from .track import TrackGeometry

STATE_FEATURES = ("v_x", "v_y", "psi", "omega", "sigma_norm", "d_lat", "phi", "lat_err")
_FRENET = {"sigma_norm", "d_lat", "phi", "lat_err"}


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureSpec:
    """Recipe for ``z_t``: ``t_u`` input lags, then ``t_x + 1`` lags of the
    state-feature block, then ``t_x + 1`` lags of the exogenous block.

    The state-feature block is ``state_features`` followed by the centerline
    yaw-rate pairs for ``lookaheads``; the exogenous block is the first
    ``n_exogenous`` recorded exogenous channels plus an optional constant 1.
    ``lat_err`` is ``d_lat`` minus exogenous channel 0.
    """

    t_u: int = 1
    t_x: int = 0
    state_features: tuple = ("v_x", "v_y", "psi", "sigma_norm", "d_lat", "phi")
    lookaheads: tuple = (0.0, 1.0, 2.0, 3.0)
    n_exogenous: int = 0
    constant: bool = True
    clamp_lookahead: bool = True
    n_u: int = 2

    def __post_init__(self):
        object.__setattr__(self, "state_features", tuple(self.state_features))
        object.__setattr__(self, "lookaheads", tuple(float(v) for v in self.lookaheads))
        bad = [f for f in self.state_features if f not in STATE_FEATURES]
        if bad:
            raise ArgumentError(f"unknown state features {bad}; choose from {STATE_FEATURES}")
        if self.t_u < 0 or self.t_x < 0 or self.n_exogenous < 0 or self.n_u < 1:
            raise ArgumentError("lags and widths must be nonnegative")
        if "lat_err" in self.state_features and self.n_exogenous < 1:
            raise ArgumentError("lat_err needs exogenous channel 0 (reference offset)")

    @property
    def layout(self) -> HistoryLayout:
        n_x = len(self.state_features) + 2 * len(self.lookaheads)
        return HistoryLayout(self.n_u, self.t_u, n_x, self.t_x, self.n_exogenous + int(self.constant))

    @property
    def n_z(self):
        return self.layout.n_z

    @property
    def tau(self):
        return max(self.t_u, self.t_x)

    @property
    def needs_track(self):
        return bool(self.lookaheads) or bool(_FRENET.intersection(self.state_features))

    def slot_names(self):
        """Human-readable name of every entry of ``z``."""
        names = []
        for k in range(1, self.t_u + 1):
            names += [f"{n}[t-{k}]" for n in INPUT_NAMES[:self.n_u]]
        block = list(self.state_features)
        for la in self.lookaheads:
            block += [f"w_c({la:g})", f"|w_c({la:g})|"]
        exo = [f"exo{j}" for j in range(self.n_exogenous)] + (["const"] if self.constant else [])
        for k in range(self.t_x + 1):
            names += [f"{n}[t-{k}]" for n in block]
        for k in range(self.t_x + 1):
            names += [f"{n}[t-{k}]" for n in exo]
        return names

    def index(self, name):
        return self.slot_names().index(name)

    def to_dict(self):
        return {"t_u": self.t_u, "t_x": self.t_x, "state_features": list(self.state_features),
                "lookaheads": list(self.lookaheads), "n_exogenous": self.n_exogenous,
                "constant": self.constant, "clamp_lookahead": self.clamp_lookahead, "n_u": self.n_u}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def feature_rows(states, exo, fspec: FeatureSpec, track: Optional[TrackGeometry]):
    """State-feature and exogenous blocks for a batch of states.

    ``states`` is ``(B, 6)``; ``exo`` is ``(B, n_e)`` or None.  Returns
    ``(Fx (B, n_x), Fe (B, n_exo))``.
    """
    S = np.atleast_2d(np.asarray(states, dtype=float))
    B = S.shape[0]
    if fspec.needs_track and track is None:
        raise ArgumentError("Frenet or lookahead features requested without a track")
    cols = []
    sigma = d_lat = phi = None
    if fspec.needs_track:
        sigma, d_lat, phi = track.frenet(S[:, 0], S[:, 1], S[:, 2])
    if fspec.n_exogenous:
        if exo is None:
            raise ArgumentError(f"feature spec needs {fspec.n_exogenous} exogenous channels, none given")
        E = np.atleast_2d(np.asarray(exo, dtype=float))
        if E.shape[1] < fspec.n_exogenous:
            raise ArgumentError(f"feature spec needs {fspec.n_exogenous} exogenous channels, got {E.shape[1]}")
        E = E[:, :fspec.n_exogenous]
    else:
        E = np.empty((B, 0))
    for name in fspec.state_features:
        if name == "v_x":
            cols.append(S[:, 3])
        elif name == "v_y":
            cols.append(S[:, 4])
        elif name == "psi":
            cols.append(S[:, 2])
        elif name == "omega":
            cols.append(S[:, 5])
        elif name == "sigma_norm":
            cols.append(sigma / track.sigma_max)
        elif name == "d_lat":
            cols.append(d_lat)
        elif name == "phi":
            cols.append(phi)
        elif name == "lat_err":
            cols.append(d_lat - E[:, 0])
    Fx = np.column_stack(cols) if cols else np.empty((B, 0))
    if fspec.lookaheads:
        from .track import centerline_yaw_rates
        W = centerline_yaw_rates(S, track, fspec.lookaheads, clamp=fspec.clamp_lookahead, sigma=sigma)
        Fx = np.hstack([Fx, W])
    Fe = np.hstack([E, np.ones((B, 1))]) if fspec.constant else E
    return Fx, Fe


def assemble_z(u_lags, x_lags, e_lags):
    """Stack lag lists (most recent first) into ``z``; works on batches."""
    parts = list(u_lags) + list(x_lags) + list(e_lags)
    return np.concatenate(parts, axis=-1)


def build_features(traj: Trajectory, inputs, fspec: FeatureSpec, track: Optional[TrackGeometry] = None):
    """Pair ``z_t`` with ``u_t`` for ``t = tau .. T-2``.

    ``inputs`` are the estimated inputs ``(T - 1, n_u)`` (or ``(T, n_u)``;
    the last row is then unused).
    """
    U = np.atleast_2d(np.asarray(inputs, dtype=float))
    if U.shape[0] == 1 and traj.T - 1 != 1:
        U = U.T
    if U.shape[0] not in (traj.T - 1, traj.T):
        raise ArgumentError(f"expected {traj.T - 1} input rows, got {U.shape[0]}")
    if U.shape[1] != fspec.n_u:
        raise ArgumentError(f"inputs have {U.shape[1]} columns, feature spec expects {fspec.n_u}")
    U = U[:traj.T - 1]
    tau = fspec.tau
    n_rows = traj.T - 1 - tau
    if n_rows < 1:
        raise ArgumentError(f"trajectory of length {traj.T} too short for warm-up {tau}")
    Fx, Fe = feature_rows(traj.states, traj.exogenous, fspec, track)
    t = np.arange(tau, traj.T - 1)
    u_l = [U[t - k] for k in range(1, fspec.t_u + 1)]
    x_l = [Fx[t - k] for k in range(fspec.t_x + 1)]
    e_l = [Fe[t - k] for k in range(fspec.t_x + 1)]
    Z = assemble_z(u_l, x_l, e_l)
    return SupervisedSequence(Z, U[t], tau=tau, layout=fspec.layout)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    track: TrackGeometry
    policy: PolicyParams
    fspec: FeatureSpec
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    T: int = 2200
    dt: float = 0.05
    integrator: str = "euler"
    noise: float = 1.0
    seed: int = 0
    v0: float = 12.0
    sigma0: float = 0.0
    exogenous: Optional[np.ndarray] = None
    min_length: int = 100

    def validate(self):
        if not self.dt > 0:
            raise ArgumentError("dt must be positive")
        if self.T < max(self.min_length, self.fspec.tau + 2):
            raise ArgumentError(f"T={self.T} shorter than warm-up plus horizon ({self.min_length})")
        if self.integrator not in INTEGRATORS:
            raise ArgumentError(f"unknown integrator {self.integrator!r}")
        if self.policy.n_z != self.fspec.n_z or self.policy.n_u != self.fspec.n_u:
            raise ArgumentError("generator policy does not match the feature layout")
        if self.noise < 0:
            raise ArgumentError("noise multiplier must be nonnegative")
        if self.exogenous is not None and np.asarray(self.exogenous).shape[0] < self.T:
            raise ArgumentError("exogenous signal shorter than T")
        return self


def initial_state(track: TrackGeometry, sigma0, v0):
    x, y, h = track.pose(sigma0)
    return np.array([float(x), float(y), float(h), v0, 0.0, 0.0])


def simulate_closed_loop(spec: ScenarioSpec) -> Trajectory:
    """Roll the switching policy in closed loop with the bicycle model.

    The records hold ``T`` states, the ``T`` inputs drawn at each state (the
    last one is never applied) and the mode drawn at each step.
    """
    spec.validate()
    fs, pol = spec.fspec, spec.policy
    rng = np.random.default_rng(spec.seed)
    step = INTEGRATORS[spec.integrator]
    E = None if spec.exogenous is None else np.asarray(spec.exogenous, dtype=float)[:spec.T]
    if E is not None and E.ndim == 1:
        E = E[:, None]
    X = np.empty((spec.T, 6))
    U = np.empty((spec.T, pol.n_u))
    labels = np.empty(spec.T, dtype=int)
    X[0] = initial_state(spec.track, spec.sigma0, spec.v0)
    u_hist = [np.zeros(pol.n_u)] * fs.t_u
    x_hist, e_hist = [], []
    prev = None
    chol = pol.chol
    for t in range(spec.T):
        try:
            Fx, Fe = feature_rows(X[t:t + 1], None if E is None else E[t:t + 1], fs, spec.track)
        except GeometryError as exc:
            raise GenerationError(f"step {t}: vehicle left the track corridor ({exc}); "
                                  "try a gentler generator policy") from None
        x_hist = [Fx[0]] + (x_hist or [Fx[0]] * fs.t_x)[:fs.t_x]
        e_hist = [Fe[0]] + (e_hist or [Fe[0]] * fs.t_x)[:fs.t_x]
        z = assemble_z(u_hist, x_hist, e_hist)
        if prev is None:
            mode = int(rng.integers(pol.d))
        else:
            mode = int(rng.choice(pol.d, p=gate_probs(pol, z, prev)))
        w = chol[mode] @ rng.standard_normal(pol.n_u) * spec.noise
        u = pol.K[mode] @ z + pol.b[mode] + w
        U[t], labels[t] = u, mode
        prev = mode
        if fs.t_u:
            u_hist = [u] + u_hist[:-1]
        if t + 1 < spec.T:
            if abs(u[1]) >= spec.vehicle.delta_max:
                raise GenerationError(f"step {t}: steering {u[1]:.3f} outside the admissible set; "
                                      "try a gentler generator policy")
            try:
                X[t + 1] = step(X[t], u, spec.dt, spec.vehicle)
            except IntegrationError as exc:
                raise GenerationError(f"step {t}: {exc}; try a gentler generator policy") from None
    meta = {"generator": "simulate_closed_loop", "seed": spec.seed, "integrator": spec.integrator,
            "noise": spec.noise, "vehicle": spec.vehicle.to_dict()}
    return Trajectory(X, spec.dt, U, E, labels, meta)


def downsample(traj: Trajectory, factor: int) -> Trajectory:
    """Keep samples ``0, f, 2f, ...``; ``dt`` is scaled by ``f``."""
    if int(factor) != factor or factor < 1:
        raise ArgumentError("downsampling factor must be a positive integer")
    f = int(factor)
    if f == 1:
        return traj
    sl = slice(0, None, f)
    meta = dict(traj.meta)
    meta["downsample"] = meta.get("downsample", 1) * f
    return Trajectory(traj.states[sl], traj.dt * f,
                      None if traj.inputs is None else traj.inputs[sl],
                      None if traj.exogenous is None else traj.exogenous[sl],
                      None if traj.labels is None else traj.labels[sl], meta)


# ---------------------------------------------------------------------------
# I/O

STATE_HEADER = ["t"] + list(STATE_NAMES)
FULL_HEADER = STATE_HEADER + list(INPUT_NAMES)


def sidecar_path(path):
    root, _ = os.path.splitext(str(path))
    return root + ".json"


def write_trajectory(traj: Trajectory, path):
    """CSV with states (and inputs when present) plus a JSON sidecar."""
    has_u = traj.inputs is not None and traj.inputs.shape[1] == 2
    header = FULL_HEADER if has_u else STATE_HEADER
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for t in range(traj.T):
            row = [f"{t * traj.dt:.17g}"] + [f"{v:.17g}" for v in traj.states[t]]
            if has_u:
                row += [f"{v:.17g}" for v in traj.inputs[t]]
            w.writerow(row)
    side = {
        "dt": repr(float(traj.dt)),
        "n_samples": traj.T,
        "meta": traj.meta,
        "labels": None if traj.labels is None else traj.labels.tolist(),
        "exogenous": None if traj.exogenous is None else [[repr(float(v)) for v in r] for r in traj.exogenous],
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(side, f, indent=1, sort_keys=True)


def read_trajectory(path) -> Trajectory:
    side_path = sidecar_path(path)
    if not os.path.exists(side_path):
        raise FormatError(f"missing sidecar {side_path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ParseError(f"{path}: empty file", row=0, column=0)
    header = [h.strip() for h in rows[0]]
    if header not in (STATE_HEADER, FULL_HEADER):
        raise ParseError(f"{path}: header {','.join(header)!r}; expected {','.join(STATE_HEADER)!r} "
                         f"or {','.join(FULL_HEADER)!r}", row=1, column=0)
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}", row=r,
                             column=len(row) + 1)
        for c, v in enumerate(row):
            try:
                data[r - 2, c] = float(v)
            except ValueError:
                raise ParseError(f"{path}: row {r}, column {c + 1} ({header[c]}): cannot parse {v!r}",
                                 row=r, column=c + 1) from None
    if data.shape[0] < 2:
        raise ParseError(f"{path}: need at least two samples", row=len(rows), column=0)
    try:
        with open(side_path) as f:
            side = json.load(f)
        dt = float(side["dt"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed sidecar {side_path}: {exc}") from None
    exo = side.get("exogenous")
    exo = None if exo is None else np.array([[float(v) for v in r] for r in exo])
    labels = side.get("labels")
    return Trajectory(data[:, 1:7], dt, data[:, 7:9] if data.shape[1] == 9 else None, exo,
                      None if labels is None else np.array(labels, dtype=int), side.get("meta") or {})


# ---------------------------------------------------------------------------
# generic linear plant


def simulate_linear_plant(policy: PolicyParams, A, B, T, seed=0, x0=None, noise=1.0, constant=True):
    """Closed loop of a switching policy with ``x_{t+1} = A x_t + B u_t``.

    The regressor is ``z_t = [u_{t-1}, x_t, 1]`` (the constant only when
    ``constant``).  Returns ``(Z (T, n_z), U (T, n_u), X (T + 1, n_x), labels)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n_x, n_u = A.shape[0], policy.n_u
    if B.shape != (n_x, n_u) or policy.n_z != n_u + n_x + int(constant):
        raise ArgumentError("plant and policy dimensions do not match")
    rng = np.random.default_rng(seed)
    X = np.zeros((T + 1, n_x))
    if x0 is not None:
        X[0] = x0
    Z = np.empty((T, policy.n_z))
    U = np.empty((T, n_u))
    labels = np.empty(T, dtype=int)
    u_prev = np.zeros(n_u)
    prev = None
    chol = policy.chol
    for t in range(T):
        z = np.concatenate([u_prev, X[t], [1.0] if constant else []])
        mode = int(rng.integers(policy.d)) if prev is None else int(rng.choice(policy.d, p=gate_probs(policy, z, prev)))
        u = policy.K[mode] @ z + policy.b[mode] + noise * (chol[mode] @ rng.standard_normal(n_u))
        if not np.all(np.isfinite(u)) or np.abs(u).max() > 1e8:
            raise GenerationError(f"step {t}: input diverged; try a gentler generator policy")
        Z[t], U[t], labels[t] = z, u, mode
        X[t + 1] = A @ X[t] + B @ u
        u_prev, prev = u, mode
    return Z, U, X, labels


# ---------------------------------------------------------------------------
# default synthetic suites


def _sticky(th, c, d, stay, leave):
    for i in range(d):
        for j in range(d):
            th[i, c, j] = stay if i == j else leave


def lane_keeping_generator(fspec: FeatureSpec) -> PolicyParams:
    """Three-mode speed policy (hold / brake / accelerate) with a shared
    Frenet steering law.

    Transitions depend on the previous mode: hold brakes ahead of curves at
    speed and accelerates on straights, braking ends below a low speed, and
    accelerating stops at a high speed or ahead of a curve.
    """
    ix = {n: i for i, n in enumerate(fspec.slot_names())}
    need = ["a[t-1]", "delta[t-1]", "v_x[t-0]", "d_lat[t-0]", "phi[t-0]", "w_c(2)[t-0]", "|w_c(3)|[t-0]",
            "const[t-0]"]
    missing = [n for n in need if n not in ix]
    if missing:
        raise ArgumentError(f"lane-keeping generator needs features {missing}")
    d, n_z = 3, fspec.n_z
    K = np.zeros((d, 2, n_z))
    b = np.zeros((d, 2))
    acc = (0.0, -2.0, 1.5)
    for i in range(d):
        K[i, 0, ix["a[t-1]"]] = 0.3
        K[i, 0, ix["v_x[t-0]"]] = -0.1
        b[i, 0] = 0.7 * acc[i] + 0.1 * 13.0
        K[i, 1, ix["delta[t-1]"]] = 0.5
        K[i, 1, ix["w_c(2)[t-0]"]] = 0.5 * 2.6 / 12.0   # wheelbase over nominal speed
        K[i, 1, ix["d_lat[t-0]"]] = -0.03
        K[i, 1, ix["phi[t-0]"]] = -0.3
    Sigma = np.array([np.diag([0.6 ** 2, 0.01 ** 2])] * d)
    th = np.zeros((d, n_z, d))
    c, w, v = ix["const[t-0]"], ix["|w_c(3)|[t-0]"], ix["v_x[t-0]"]
    _sticky(th, c, d, 4.0, -4.0)
    s = 40.0
    # hold -> brake (curve ahead and fast), hold -> accelerate (straight ahead)
    th[0, w, 1], th[0, v, 1], th[0, c, 1] = s, 3.0, 4.0 - s * 0.18 - 3.0 * 11.5
    th[0, w, 2], th[0, c, 2] = -s, 4.0 + s * 0.06
    # brake -> hold when slow
    th[1, v, 0], th[1, c, 0] = -3.0, 4.0 + 3.0 * 9.5
    # accelerate -> brake ahead of a curve, -> hold when fast
    th[2, w, 1], th[2, c, 1] = s, 4.0 - s * 0.17
    th[2, v, 0], th[2, c, 0] = 3.0, 4.0 - 3.0 * 14.0
    return PolicyParams(K, b, Sigma, th)


def lane_change_generator(fspec: FeatureSpec) -> PolicyParams:
    """Four-mode policy on a straight road: cruise, maneuver-brake,
    maneuver-accelerate, slow cruise.  Exogenous channel 0 is the lateral
    reference, channel 1 a maneuver flag that pushes the gate to modes 1-2."""
    ix = {n: i for i, n in enumerate(fspec.slot_names())}
    need = ["a[t-1]", "delta[t-1]", "v_x[t-0]", "lat_err[t-0]", "phi[t-0]", "exo1[t-0]", "const[t-0]"]
    missing = [n for n in need if n not in ix]
    if missing:
        raise ArgumentError(f"lane-change generator needs features {missing}")
    d, n_z = 4, fspec.n_z
    K = np.zeros((d, 2, n_z))
    b = np.zeros((d, 2))
    kd = (0.02, 0.05, 0.05, 0.02)
    kphi = (0.3, 0.5, 0.5, 0.3)
    acc = (0.0, -1.0, 1.0, 0.0)
    vt = (17.0, 15.0, 15.0, 11.0)
    for i in range(d):
        K[i, 0, ix["a[t-1]"]] = 0.3
        K[i, 0, ix["v_x[t-0]"]] = -0.2
        b[i, 0] = 0.7 * acc[i] + 0.2 * vt[i]
        K[i, 1, ix["delta[t-1]"]] = 0.5
        K[i, 1, ix["lat_err[t-0]"]] = -0.5 * kd[i]
        K[i, 1, ix["phi[t-0]"]] = -0.5 * kphi[i]
    Sigma = np.array([np.diag([0.4 ** 2, 0.008 ** 2])] * d)
    th = np.zeros((d, n_z, d))
    c, f, v = ix["const[t-0]"], ix["exo1[t-0]"], ix["v_x[t-0]"]
    _sticky(th, c, d, 3.0, -3.0)
    for i in range(d):
        th[i, f, 1] += 5.0
        th[i, f, 2] += 4.0
        th[i, f, 0] -= 4.0
        th[i, f, 3] -= 4.0
    th[0, v, 3] += 2.0
    th[0, c, 3] -= 2.0 * 15.5
    th[3, v, 0] -= 2.0
    th[3, c, 0] += 2.0 * 13.0
    return PolicyParams(K, b, Sigma, th)


def lane_change_exogenous(T, rng, offset=3.5):
    """Double lane change: reference offset and maneuver flag channels."""
    E = np.zeros((T, 2))
    t1 = int(rng.integers(80, 140))
    w = int(rng.integers(60, 90))
    gap = int(rng.integers(40, 80))
    E[t1:t1 + 2 * w + gap, 1] = 1.0
    E[t1:t1 + w + gap, 0] = offset
    return E


LK_FEATURES = FeatureSpec()
LC_FEATURES = FeatureSpec(state_features=("v_x", "v_y", "psi", "lat_err", "phi"), lookaheads=(), n_exogenous=2)


@dataclass
class SyntheticSuite:
    name: str
    track: TrackGeometry
    fspec: FeatureSpec
    generator: PolicyParams
    vehicle: VehicleParams
    integrator: str
    train: list
    val: list
    test: list

    def estimated_inputs(self, traj):
        from .bicycle import invert_inputs
        return invert_inputs(traj.states, traj.dt, self.vehicle)

    def sequences(self, split):
        trajs = getattr(self, split)
        return [build_features(t, self.estimated_inputs(t), self.fspec, self.track) for t in trajs]


def make_suite(name="lane-keeping", seed=0, split=None, T=None, integrator="euler", noise=1.0,
               vehicle=None) -> SyntheticSuite:
    """Generate one of the default synthetic suites.

    ``lane-keeping``: sinusoidal-curvature track, d=3, T=2200, split 3/1/1.
    ``lane-change``: straight road, double lane change, d=4, T=400, split 14/3/4.
    Trajectory ``k`` uses seed ``seed + k``.
    """
    vehicle = vehicle or VehicleParams()
    if name == "lane-keeping":
        fspec = LK_FEATURES
        track = TrackGeometry.sinusoidal(2000.0, 0.025, 250.0, piece=1.0, lead_in=20.0)
        gen = lane_keeping_generator(fspec)
        split = split or (3, 1, 1)
        T = T or 2200
        v0 = 12.0
        exo = lambda rng: None
    elif name == "lane-change":
        fspec = LC_FEATURES
        track = TrackGeometry.straight(600.0)
        gen = lane_change_generator(fspec)
        split = split or (14, 3, 4)
        T = T or 400
        v0 = 15.0
        exo = lambda rng: lane_change_exogenous(T, rng)
    else:
        raise ArgumentError(f"unknown suite {name!r}")
    trajs = []
    for k in range(sum(split)):
        rng = np.random.default_rng([seed + k, 7])
        spec = ScenarioSpec(track, gen, fspec, vehicle, T=T, integrator=integrator, noise=noise, seed=seed + k,
                            v0=v0, exogenous=exo(rng))
        trajs.append(simulate_closed_loop(spec))
    a, b = split[0], split[0] + split[1]
    return SyntheticSuite(name, track, fspec, gen, vehicle, integrator, trajs[:a], trajs[a:b], trajs[b:])
