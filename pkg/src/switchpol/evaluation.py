"""Prediction protocols and error metrics.

A prediction starts from an init window of ``n_init`` samples: the estimated
inputs ``u_0..u_{n_init-2}`` seed the input lags and the filtered mode
distribution, the state ``x_{n_init-1}`` is the last ground truth, and the
``horizon`` predicted states are ``x_{n_init} .. x_{n_init+horizon-1}``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bicycle import INTEGRATORS, STATE_NAMES, VehicleParams
from .core import PolicyParams, Trajectory, expert_means, gate_features, log_softmax_rows
from .datagen import FeatureSpec, assemble_z, build_features, feature_rows
from .errors import ArgumentError, GeometryError, IntegrationError, SwitchpolError
from .inference import forward_filter


@dataclass(frozen=True)
class Dynamics:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    integrator: str = "euler"
    dt: float = 0.05

    def step(self, x, u):
        return INTEGRATORS[self.integrator](x, u, self.dt, self.vehicle)


@dataclass(frozen=True)
class PredictionRun:
    mode: str = "joint"
    horizon: int = 60
    n_samples: int = 100
    trim: float = 0.01
    n_init: int = 30
    seed: int = 0
    posterior_mean: bool = False
    segment_length: int = 100

    def validate(self, tau=0):
        if self.mode not in ("recursive-one-step", "joint"):
            raise ArgumentError(f"unknown prediction mode {self.mode!r}")
        if self.horizon < 1 or self.n_samples < 1:
            raise ArgumentError("horizon and n_samples must be at least 1")
        if not 0 <= self.trim < 0.5:
            raise ArgumentError("trim fraction must lie in [0, 0.5)")
        if self.n_init < tau + 2:
            raise ArgumentError(f"init window {self.n_init} shorter than warm-up {tau} + 2")
        if self.segment_length < self.n_init + self.horizon:
            raise ArgumentError("segment shorter than init window plus horizon")
        return self


@dataclass
class Rollouts:
    """``states`` (n, horizon, 6) and ``inputs`` (n, horizon, n_u); entries
    after a truncation are NaN and the rollout index is listed in ``truncated``."""

    states: np.ndarray
    inputs: np.ndarray
    modes: np.ndarray
    truncated: list = field(default_factory=list)
    z_state_slots: Optional[np.ndarray] = None

    @property
    def complete(self):
        keep = np.ones(self.states.shape[0], dtype=bool)
        keep[self.truncated] = False
        return keep


# ---------------------------------------------------------------------------
# metrics


def trimmed_mean(rollouts, fraction):
    """Per step and dimension: drop ``ceil(fraction n)`` values at each tail
    of the rollout axis (axis 0) and average the rest."""
    R = np.asarray(rollouts, dtype=float)
    if R.ndim < 1 or R.shape[0] == 0:
        raise ArgumentError("no rollouts to average")
    if not 0 <= fraction < 0.5:
        raise ArgumentError("trim fraction must lie in [0, 0.5)")
    n = R.shape[0]
    k = math.ceil(fraction * n - 1e-12)
    if n - 2 * k < 1:
        raise ArgumentError(f"trimming {k} values per tail leaves nothing of {n}")
    S = np.sort(R, axis=0)
    return S[k:n - k].mean(axis=0)


def quantile_bands(rollouts, qs=(0.25, 0.75)):
    return np.quantile(np.asarray(rollouts, dtype=float), qs, axis=0)


def mae(pred, truth):
    """Per-dimension mean absolute error over the time axis."""
    P = np.asarray(pred, dtype=float)
    Tr = np.asarray(truth, dtype=float)
    if P.shape != Tr.shape:
        raise ArgumentError(f"prediction shape {P.shape} != truth shape {Tr.shape}")
    if P.shape[0] == 0:
        raise ArgumentError("empty sequences")
    return np.abs(P - Tr).mean(axis=0)


# ---------------------------------------------------------------------------
# prediction core


def _init_state(params: PolicyParams, traj: Trajectory, inputs, fspec, track, n_init, prior_override=None):
    """Filtered mode distribution after the init inputs."""
    if prior_override is not None:
        p = np.asarray(prior_override, dtype=float)
        if p.shape != (params.d,):
            raise ArgumentError("mode prior has the wrong length")
        return p / p.sum()
    win = traj.window(0, n_init)
    seq = build_features(win, inputs[:n_init - 1], fspec, track)
    return forward_filter(seq, params)[-1]


def _seed_histories(traj, inputs, fspec, track, n_init, u0=None):
    t0 = n_init - 1
    U = np.asarray(inputs, dtype=float)
    u_hist = [U[t0 - k].copy() for k in range(1, fspec.t_u + 1)]
    if u0 is not None:
        u0 = np.asarray(u0, dtype=float)
        if fspec.t_u == 0:
            raise ArgumentError("cannot override the input seed without input lags")
        u_hist[0] = u0
    lo = t0 - fspec.t_x
    if lo < 0:
        raise ArgumentError("init window shorter than the state-lag depth")
    Fx, Fe = feature_rows(traj.states[lo:t0 + 1], None if traj.exogenous is None else traj.exogenous[lo:t0 + 1],
                          fspec, track)
    x_hist = [Fx[fspec.t_x - k] for k in range(fspec.t_x + 1)]
    e_hist = [Fe[fspec.t_x - k] for k in range(fspec.t_x + 1)]
    return u_hist, x_hist, e_hist


def _gate_dist(params, Z, P_prev):
    """Next-mode distribution for each row given a previous-mode distribution."""
    F = gate_features(params.kind, Z)
    logp = log_softmax_rows(np.einsum("nf,sfj->nsj", F, params.blocks()))
    T = np.exp(np.broadcast_to(logp, (Z.shape[0], params.d, params.d)))
    return np.einsum("ns,nsj->nj", P_prev, T)


def _safe_features(states, exo, fspec, track, active):
    """Features for active rows; rows whose projection fails are deactivated."""
    n = states.shape[0]
    Fx = np.full((n, fspec.layout.n_x), np.nan)
    Fe = np.full((n, fspec.layout.n_exo), np.nan)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return Fx, Fe, active
    E = None if exo is None else np.repeat(np.atleast_2d(exo), idx.size, axis=0)
    try:
        Fx[idx], Fe[idx] = feature_rows(states[idx], E, fspec, track)
        return Fx, Fe, active
    except GeometryError:
        pass
    active = active.copy()
    for i in idx:
        try:
            Fx[i], Fe[i] = feature_rows(states[i:i + 1], None if exo is None else np.atleast_2d(exo), fspec, track)
        except GeometryError:
            active[i] = False
    return Fx, Fe, active


def _safe_step(dyn: Dynamics, X, U, active):
    out = np.full_like(X, np.nan)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return out, active
    try:
        out[idx] = dyn.step(X[idx], U[idx])
        return out, active
    except (IntegrationError, ArgumentError):
        pass
    active = active.copy()
    for i in idx:
        try:
            out[i] = dyn.step(X[i], U[i])
        except (IntegrationError, ArgumentError):
            active[i] = False
    return out, active


def _predict(params: PolicyParams, traj: Trajectory, inputs, fspec: FeatureSpec, dyn: Dynamics,
             run: PredictionRun, track=None, joint=True, u0=None, prior0=None, audit=False):
    run.validate(fspec.tau)
    if traj.T < run.n_init + run.horizon:
        raise ArgumentError(f"trajectory of length {traj.T} shorter than init + horizon")
    if params.n_z != fspec.n_z or params.n_u != fspec.n_u:
        raise ArgumentError("model does not match the feature layout")
    t0 = run.n_init - 1
    n = 1 if run.posterior_mean else run.n_samples
    rng = np.random.default_rng(run.seed)
    p_prev = _init_state(params, traj, inputs, fspec, track, run.n_init, prior0)
    u_hist, x_hist, e_hist = _seed_histories(traj, inputs, fspec, track, run.n_init, u0)
    u_hist = [np.tile(u, (n, 1)) for u in u_hist]
    x_hist = [np.tile(x, (n, 1)) for x in x_hist]
    e_hist = [np.tile(e, (n, 1)) for e in e_hist]
    X = np.tile(traj.states[t0], (n, 1))
    S = np.full((n, run.horizon, traj.states.shape[1]), np.nan)
    Uo = np.full((n, run.horizon, params.n_u), np.nan)
    modes = np.full((n, run.horizon), -1)
    active = np.ones(n, dtype=bool)
    P = np.tile(p_prev, (n, 1))
    prev = None if run.posterior_mean else rng.choice(params.d, size=n, p=p_prev)
    audit_slots = [] if audit else None
    for h in range(run.horizon):
        t = t0 + h
        z = assemble_z(u_hist, x_hist, e_hist)
        if audit:
            audit_slots.append(z[:, fspec.layout.u_lag_slice.stop:].copy())
        means = expert_means(params, np.nan_to_num(z))  # (n, d, n_u)
        if run.posterior_mean:
            P = _gate_dist(params, np.nan_to_num(z), P)
            u = np.einsum("nj,nju->nu", P, means)
            modes[:, h] = P.argmax(axis=1)
        else:
            onehot = np.eye(params.d)[prev]
            probs = _gate_dist(params, np.nan_to_num(z), onehot)
            c = probs.cumsum(axis=1)
            r = rng.random(n)[:, None]
            cur = np.minimum((r > c).sum(axis=1), params.d - 1)
            w = np.einsum("nab,nb->na", params.chol[cur], rng.standard_normal((n, params.n_u)))
            u = means[np.arange(n), cur] + w
            prev = cur
            modes[:, h] = cur
        u = np.where(active[:, None], u, np.nan)
        Uo[:, h] = u
        base = X if joint else np.tile(traj.states[t], (n, 1))
        Xn, active = _safe_step(dyn, base, u, active)
        S[:, h] = Xn
        X = Xn
        if h + 1 == run.horizon:
            break
        src = Xn if joint else np.tile(traj.states[t + 1], (n, 1))
        exo = None if traj.exogenous is None else traj.exogenous[t + 1]
        Fx, Fe, active = _safe_features(src, exo, fspec, track, active)
        if fspec.t_u:
            u_hist = [u] + u_hist[:-1]
        x_hist = [Fx] + x_hist[:-1]
        e_hist = [Fe] + e_hist[:-1]
    truncated = [int(i) for i in np.flatnonzero(~active)]
    for i in truncated:
        first = np.flatnonzero(np.isnan(S[i, :, 0]))
        if first.size:
            S[i, first[0]:] = np.nan
            Uo[i, first[0]:] = np.nan
    if truncated:
        warnings.warn(f"{len(truncated)} rollout(s) left the feature-valid region and were truncated")
    return Rollouts(S, Uo, modes, truncated, None if not audit else np.stack(audit_slots, axis=1))


def recursive_one_step(params, traj, inputs, fspec, dyn, run, track=None, u0=None, prior0=None, audit=False):
    """Inputs predicted recursively from their own lags; state slots of ``z``
    and the state each step starts from are ground truth."""
    return _predict(params, traj, inputs, fspec, dyn, run, track, joint=False, u0=u0, prior0=prior0, audit=audit)


def joint_prediction(params, traj, inputs, fspec, dyn, run, track=None, u0=None, prior0=None):
    """Closed-loop rollouts of inputs and states."""
    return _predict(params, traj, inputs, fspec, dyn, run, track, joint=True, u0=u0, prior0=prior0)


def baseline_cc(traj: Trajectory, inputs, n_init, horizon, dyn: Dynamics):
    """Hold the last init-window input and roll the dynamics from the last
    ground-truth state."""
    t0 = n_init - 1
    u = np.asarray(inputs, dtype=float)[t0 - 1]
    x = traj.states[t0]
    out = np.empty((horizon, traj.states.shape[1]))
    for h in range(horizon):
        x = dyn.step(x, u)
        out[h] = x
    return out


def point_prediction(rollouts: Rollouts, trim):
    keep = rollouts.complete
    if not keep.any():
        raise SwitchpolError("every rollout was truncated")
    S = rollouts.states[keep]
    if S.shape[0] == 1:
        # posterior-mean runs give one deterministic rollout; nothing to trim
        return S[0]
    return trimmed_mean(S, trim)


# ---------------------------------------------------------------------------
# segment evaluation


@dataclass
class MetricTable:
    """Per-method mean and std (across segments) of per-state MAE."""

    methods: list
    mean: np.ndarray
    std: np.ndarray
    per_segment: dict
    state_names: tuple = STATE_NAMES
    truncated: dict = field(default_factory=dict)

    def row(self, method):
        return self.mean[self.methods.index(method)]

    def to_dict(self):
        return {
            "methods": list(self.methods),
            "states": list(self.state_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "n_segments": {m: len(v) for m, v in self.per_segment.items()},
            "truncated_rollouts": dict(self.truncated),
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method"] + [f"{s}_mean" for s in self.state_names] + [f"{s}_std" for s in self.state_names])
            for k, m in enumerate(self.methods):
                w.writerow([m] + [f"{v:.10g}" for v in self.mean[k]] + [f"{v:.10g}" for v in self.std[k]])

    def format(self):
        lines = ["method".ljust(14) + "".join(s.rjust(18) for s in self.state_names)]
        for k, m in enumerate(self.methods):
            lines.append(m.ljust(14) + "".join(f"{a:9.4f}±{s:<8.4f}" for a, s in zip(self.mean[k], self.std[k])))
        return "\n".join(lines)


def segments(T, length):
    return [(s, s + length) for s in range(0, T - length + 1, length)]


def segment_eval(methods: dict, trajs, inputs_list, fspec: FeatureSpec, dyn: Dynamics, run: PredictionRun,
                 track=None, plot_sink=None) -> MetricTable:
    """Evaluate every method on non-overlapping segments of every trajectory.

    ``methods`` maps names to PolicyParams or the string ``"CC"``.
    ``plot_sink`` (optional list) receives per-segment plot records.
    """
    run.validate(fspec.tau)
    per = {m: [] for m in methods}
    trunc = {m: 0 for m in methods}
    for k, (traj, U) in enumerate(zip(trajs, inputs_list)):
        segs = segments(traj.T, run.segment_length)
        if not segs:
            warnings.warn(f"trajectory {k} shorter than one segment; skipped")
            continue
        for si, (a, b) in enumerate(segs):
            win = traj.window(a, b)
            Uw = np.asarray(U)[a:b]
            truth = win.states[run.n_init:run.n_init + run.horizon]
            for mi, (name, model) in enumerate(methods.items()):
                if isinstance(model, str) and model.upper() == "CC":
                    pred = baseline_cc(win, Uw, run.n_init, run.horizon, dyn)
                    band = None
                else:
                    seg_run = PredictionRun(run.mode, run.horizon, run.n_samples, run.trim, run.n_init,
                                            run.seed + 1000 * k + si, run.posterior_mean, run.segment_length)
                    fn = joint_prediction if run.mode == "joint" else recursive_one_step
                    ro = fn(model, win, Uw, fspec, dyn, seg_run, track)
                    trunc[name] += len(ro.truncated)
                    pred = point_prediction(ro, run.trim)
                    band = quantile_bands(ro.states[ro.complete])
                per[name].append(mae(pred, truth))
                if plot_sink is not None:
                    plot_sink.append({"trajectory": k, "segment": si, "method": name, "truth": truth,
                                      "pred": pred, "band": band})
    names = list(methods)
    if not per[names[0]]:
        raise ArgumentError("no trajectory long enough for a single segment")
    mean = np.array([np.mean(per[m], axis=0) for m in names])
    std = np.array([np.std(per[m], axis=0) for m in names])
    return MetricTable(names, mean, std, {m: np.array(v) for m, v in per.items()}, truncated=trunc)
