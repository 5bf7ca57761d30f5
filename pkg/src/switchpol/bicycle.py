"""Dynamic bicycle model with a linear tire model, its discretizations, and
the inverse map recovering ``(a, delta)`` from two consecutive states.

States are arrays ``[p_X, p_Y, psi, v_x, v_y, omega]`` and inputs arrays
``[a, delta]``; every function accepts a single vector or a batch with the
components on the last axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError, InversionInfeasibleError, IntegrationError, SolverError

PX, PY, PSI, VX, VY, OMEGA = range(6)
STATE_NAMES = ("p_X", "p_Y", "psi", "v_x", "v_y", "omega")
INPUT_NAMES = ("a", "delta")
N_X = 6
N_U = 2


@dataclass(frozen=True)
class VehicleParams:
    M: float = 1500.0
    I_z: float = 2250.0
    l_f: float = 1.2
    l_r: float = 1.4
    C_f: float = 60000.0
    C_r: float = 60000.0
    delta_max: float = 0.6

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ArgumentError(f"vehicle parameter {k} must be positive")
        if self.delta_max >= np.pi / 2:
            raise ArgumentError("delta_max must be below pi/2")

    def to_dict(self):
        return asdict(self)


def _check_vx(vx):
    if np.any(np.asarray(vx) <= 0):
        raise ArgumentError("longitudinal velocity must be positive where slip angles are evaluated")


def slip_angles(state, delta, params: VehicleParams):
    x = np.asarray(state, dtype=float)
    vx, vy, om = x[..., VX], x[..., VY], x[..., OMEGA]
    _check_vx(vx)
    alpha_f = delta - np.arctan((om * params.l_f + vy) / vx)
    alpha_r = np.arctan((om * params.l_r - vy) / vx)
    return alpha_f, alpha_r


def lateral_forces(state, delta, params: VehicleParams):
    """Front and rear lateral tire forces ``2 C alpha``."""
    af, ar = slip_angles(state, delta, params)
    return 2.0 * params.C_f * af, 2.0 * params.C_r * ar


def f_continuous(state, u, params: VehicleParams):
    """Time derivative of the state."""
    x = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    a, delta = u[..., 0], u[..., 1]
    psi, vx, vy, om = x[..., PSI], x[..., VX], x[..., VY], x[..., OMEGA]
    Fyf, Fyr = lateral_forces(x, delta, params)
    c, s = np.cos(psi), np.sin(psi)
    cd, sd = np.cos(delta), np.sin(delta)
    return np.stack([
        vx * c - vy * s,
        vy * c + vx * s,
        om,
        a + vy * om - Fyf * sd / params.M,
        -vx * om + (Fyf * cd + Fyr) / params.M,
        (params.l_f * Fyf * cd - params.l_r * Fyr) / params.I_z,
    ], axis=-1)


def _check_step(x_new):
    if np.any(x_new[..., VX] <= 0) or not np.all(np.isfinite(x_new)):
        raise IntegrationError("integration step produced a non-positive longitudinal velocity")
    return x_new


def step_euler(state, u, dt, params: VehicleParams):
    if not dt > 0:
        raise ArgumentError("dt must be positive")
    x = np.asarray(state, dtype=float)
    return _check_step(x + dt * f_continuous(x, u, params))


def step_rk4(state, u, dt, params: VehicleParams):
    if not dt > 0:
        raise ArgumentError("dt must be positive")
    x = np.asarray(state, dtype=float)
    try:
        k1 = f_continuous(x, u, params)
        k2 = f_continuous(x + 0.5 * dt * k1, u, params)
        k3 = f_continuous(x + 0.5 * dt * k2, u, params)
        k4 = f_continuous(x + dt * k3, u, params)
    except ArgumentError as exc:
        raise IntegrationError(f"intermediate RK4 stage invalid: {exc}") from None
    return _check_step(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


INTEGRATORS = {"euler": step_euler, "rk4": step_rk4}


# ---------------------------------------------------------------------------
# inversion


def _yaw_residual(delta, beta_f, Fyr, omega_dot, params):
    Fyf = 2.0 * params.C_f * (delta - beta_f)
    return (params.l_f * Fyf * np.cos(delta) - params.l_r * Fyr) / params.I_z - omega_dot


def _yaw_residual_slope(delta, beta_f, params):
    return 2.0 * params.C_f * params.l_f / params.I_z * (np.cos(delta) - (delta - beta_f) * np.sin(delta))


def solve_steering(x_t, omega_dot, params: VehicleParams, tol=1e-10, max_iter=100, method="newton",
                   t_index=None):
    """Solve the yaw-rate equation for the steering angle on ``[-delta_max, delta_max]``.

    Vectorized over a batch of states.  ``method="newton"`` uses Newton steps
    safeguarded by a shrinking bracket; ``method="bisection"`` bisects only.
    """
    x = np.atleast_2d(np.asarray(x_t, dtype=float))
    omega_dot = np.atleast_1d(np.asarray(omega_dot, dtype=float))
    vx, vy, om = x[:, VX], x[:, VY], x[:, OMEGA]
    _check_vx(vx)
    beta_f = np.arctan((om * params.l_f + vy) / vx)
    Fyr = 2.0 * params.C_r * np.arctan((om * params.l_r - vy) / vx)
    lo = np.full(x.shape[0], -params.delta_max)
    hi = np.full(x.shape[0], params.delta_max)
    r_lo = _yaw_residual(lo, beta_f, Fyr, omega_dot, params)
    r_hi = _yaw_residual(hi, beta_f, Fyr, omega_dot, params)
    bad = np.sign(r_lo) * np.sign(r_hi) > 0
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        t = k if t_index is None else t_index[k]
        raise InversionInfeasibleError("steering residual has no sign change on the admissible set", t)
    span = np.where(r_hi - r_lo == 0, 1.0, r_hi - r_lo)
    delta = np.clip(lo - r_lo / span * (hi - lo), -params.delta_max, params.delta_max)
    # orient so that r(lo) <= 0 <= r(hi)
    flip = r_lo > 0
    lo, hi = np.where(flip, hi, lo), np.where(flip, lo, hi)
    for _ in range(max_iter):
        r = _yaw_residual(delta, beta_f, Fyr, omega_dot, params)
        done = np.abs(r) <= tol
        if np.all(done):
            return delta
        neg = r < 0
        lo = np.where(neg & ~done, delta, lo)
        hi = np.where(~neg & ~done, delta, hi)
        mid = 0.5 * (lo + hi)
        if method == "newton":
            slope = _yaw_residual_slope(delta, beta_f, params)
            with np.errstate(divide="ignore", invalid="ignore"):
                cand = delta - r / slope
            inside = np.isfinite(cand) & (cand > np.minimum(lo, hi)) & (cand < np.maximum(lo, hi))
            step = np.where(inside, cand, mid)
        else:
            step = mid
        delta = np.where(done, delta, step)
    r = _yaw_residual(delta, beta_f, Fyr, omega_dot, params)
    if np.all(np.abs(r) <= tol):
        return delta
    raise SolverError("steering root-finding did not converge",
                      {"max_abs_residual": float(np.abs(r).max()), "iterations": max_iter})


def invert_inputs(states, dt, params: VehicleParams, method="newton", tol=1e-10):
    """Estimate ``(a, delta)`` for every consecutive pair of a state sequence.

    Returns an array of shape ``(T - 1, 2)``.
    """
    X = np.asarray(states, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ArgumentError("need at least two states to estimate inputs")
    if not dt > 0:
        raise ArgumentError("dt must be positive")
    x0, x1 = X[:-1], X[1:]
    omega_dot = (x1[:, OMEGA] - x0[:, OMEGA]) / dt
    delta = solve_steering(x0, omega_dot, params, tol=tol, method=method, t_index=np.arange(x0.shape[0]))
    Fyf, _ = lateral_forces(x0, delta, params)
    a = (x1[:, VX] - x0[:, VX]) / dt - x0[:, VY] * x0[:, OMEGA] + Fyf * np.sin(delta) / params.M
    return np.column_stack([a, delta])


def invert_input(x_t, x_next, dt, params: VehicleParams, method="newton", t=None):
    """Recover the input that moves ``x_t`` to ``x_next`` under the Euler scheme."""
    try:
        u = invert_inputs(np.vstack([x_t, x_next]), dt, params, method=method)
    except InversionInfeasibleError as exc:
        raise InversionInfeasibleError("steering residual has no sign change on the admissible set",
                                       t) from exc
    return u[0]


def yaw_residual(x_t, delta, omega_dot, params: VehicleParams):
    """Residual of the steering equation at ``delta`` (exposed for diagnostics)."""
    x = np.asarray(x_t, dtype=float)
    vx, vy, om = x[..., VX], x[..., VY], x[..., OMEGA]
    _check_vx(vx)
    beta_f = np.arctan((om * params.l_f + vy) / vx)
    Fyr = 2.0 * params.C_r * np.arctan((om * params.l_r - vy) / vx)
    return _yaw_residual(np.asarray(delta, dtype=float), beta_f, Fyr, omega_dot, params)
