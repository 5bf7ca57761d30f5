"""Domain types and probability primitives for the switching policy.

The policy switches among ``d`` affine Gaussian experts::

    xi_t ~ softmax(Theta_{xi_{t-1}}^T z_t)
    u_t  = K_{xi_t} z_t + b_{xi_t} + w_t,    w_t ~ N(0, Sigma_{xi_t})

Modes are 0-based throughout the package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import ArgumentError, FormatError, LayoutError, NumericDomainError

PARAMS_VERSION = "switchpol-params-v1"

GENERAL = "general"
STATIC = "static"
MODE_DEPENDENT = "mode-dependent"
STATE_DEPENDENT = "state-dependent"
SWITCHING_KINDS = (GENERAL, STATIC, MODE_DEPENDENT, STATE_DEPENDENT)

LOG_2PI = np.log(2.0 * np.pi)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_vector(v):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ArgumentError("expected a nonempty 1-D vector")
    if np.isnan(v).any():
        raise ArgumentError("vector contains NaN")
    return v


def lse(v) -> float:
    """Shift-stable ``ln sum exp(v)``."""
    v = _check_vector(v)
    m = v.max()
    if not np.isfinite(m):
        raise ArgumentError("vector contains non-finite entries")
    return float(m + np.log(np.exp(v - m).sum()))


def softmax(v) -> np.ndarray:
    v = _check_vector(v)
    return np.exp(v - lse(v))


def log_softmax_rows(a):
    """Row-wise log-softmax over the last axis (no argument checking)."""
    m = a.max(axis=-1, keepdims=True)
    s = a - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def chol_pd(S, mode=None, what="covariance"):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises NumericDomainError naming ``mode`` if the matrix is not PD.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ArgumentError(f"{what} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericDomainError(f"{what} has non-finite entries", mode)
    Ssym = 0.5 * (S + S.T)
    try:
        return cholesky(Ssym, lower=True)
    except np.linalg.LinAlgError:
        raise NumericDomainError(f"{what} is not positive definite", mode) from None


def gauss_logpdf(u, mean, Sigma, mode=None) -> float:
    """Log-density of ``N(mean, Sigma)`` at ``u``, via a Cholesky factor."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if u.shape != mean.shape or Sigma.shape != (u.size, u.size):
        raise ArgumentError("inconsistent shapes for gauss_logpdf")
    L = chol_pd(Sigma, mode)
    r = np.linalg.solve(L, u - mean)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return float(-0.5 * (r @ r + logdet + u.size * LOG_2PI))


def gauss_logpdf_rows(U, Mean, Sigma, mode=None):
    """Vectorized log-density for rows of ``U`` against rows of ``Mean``."""
    L = chol_pd(Sigma, mode)
    R = np.linalg.solve(L, (U - Mean).T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * ((R * R).sum(axis=0) + logdet + U.shape[1] * LOG_2PI)


# ---------------------------------------------------------------------------
# history vectors


@dataclass(frozen=True)
class HistoryLayout:
    """Slot layout of ``z_t``: u-lags first, then state lags, then exogenous lags.

    ``n_x`` is the width of one state-feature block and ``n_exo`` the width of
    one exogenous block; both state and exogenous features carry ``t_x + 1``
    lags (most recent first), u-lags carry ``t_u``.
    """

    n_u: int
    t_u: int
    n_x: int
    t_x: int
    n_exo: int = 0

    def __post_init__(self):
        for name in ("n_u", "n_x", "t_x", "n_exo", "t_u"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be nonnegative")

    @property
    def n_z(self) -> int:
        return self.t_u * self.n_u + (self.t_x + 1) * (self.n_x + self.n_exo)

    @property
    def u_lag_slice(self) -> slice:
        return slice(0, self.t_u * self.n_u)

    def u_lag(self, k: int) -> slice:
        """Slot of ``u_{t-k}`` for ``k = 1..t_u``."""
        if not 1 <= k <= self.t_u:
            raise ArgumentError(f"u-lag {k} outside 1..{self.t_u}")
        return slice((k - 1) * self.n_u, k * self.n_u)

    def x_lag(self, k: int) -> slice:
        """Slot of the state features at ``t - k`` for ``k = 0..t_x``."""
        if not 0 <= k <= self.t_x:
            raise ArgumentError(f"state lag {k} outside 0..{self.t_x}")
        start = self.t_u * self.n_u + k * self.n_x
        return slice(start, start + self.n_x)

    def exo_lag(self, k: int) -> slice:
        if not 0 <= k <= self.t_x:
            raise ArgumentError(f"exogenous lag {k} outside 0..{self.t_x}")
        start = self.t_u * self.n_u + (self.t_x + 1) * self.n_x + k * self.n_exo
        return slice(start, start + self.n_exo)

    def slot_sizes(self):
        return [self.n_u] * self.t_u + [self.n_x] * (self.t_x + 1) + [self.n_exo] * (self.t_x + 1)

    def require_leading_u_lag(self, n_u: int):
        if self.t_u < 1 or self.n_u != n_u:
            raise LayoutError("u-lag block must occupy the first n_u slots of z")

    def to_dict(self):
        return {"n_u": self.n_u, "t_u": self.t_u, "n_x": self.n_x, "t_x": self.t_x, "n_exo": self.n_exo}


@dataclass(frozen=True)
class HistoryVector:
    values: np.ndarray
    layout: HistoryLayout

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 1 or v.size != self.layout.n_z:
            raise ArgumentError(f"history vector has size {v.size}, layout needs {self.layout.n_z}")
        if sum(self.layout.slot_sizes()) != v.size:
            raise ArgumentError("layout slot sizes do not sum to n_z")
        object.__setattr__(self, "values", v)


def _as_z(z):
    if isinstance(z, HistoryVector):
        return z.values
    return np.asarray(z, dtype=float)


def check_mode(i, d) -> int:
    """Bounds-check a 0-based mode index."""
    if isinstance(i, (bool, np.bool_)) or int(i) != i or not 0 <= int(i) < d:
        raise ArgumentError(f"mode index {i} outside 0..{d - 1}")
    return int(i)


# ---------------------------------------------------------------------------
# parameters


def theta_shape(kind, d, n_z):
    return {
        GENERAL: (d, n_z, d),
        STATIC: (1, d),
        MODE_DEPENDENT: (d, d),
        STATE_DEPENDENT: (n_z, d),
    }[kind]


def theta_blocks(kind, theta, d):
    """View gating weights as ``(n_slots, n_feat, d)`` blocks.

    ``n_slots`` is ``d`` when the gate depends on the previous mode and 1
    otherwise; ``n_feat`` is ``n_z`` when it depends on ``z`` and 1 (a
    constant feature) otherwise.
    """
    if kind == GENERAL:
        return theta
    if kind == STATIC:
        return theta.reshape(1, 1, d)
    if kind == MODE_DEPENDENT:
        return theta.reshape(d, 1, d)
    return theta.reshape(1, theta.shape[0], d)


def theta_from_blocks(kind, blocks, d, n_z):
    return np.asarray(blocks, dtype=float).reshape(theta_shape(kind, d, n_z))


def uses_prev_mode(kind):
    return kind in (GENERAL, MODE_DEPENDENT)


def uses_z(kind):
    return kind in (GENERAL, STATE_DEPENDENT)


@dataclass(frozen=True)
class PolicyParams:
    """Expert gains ``K`` (d, n_u, n_z), offsets ``b`` (d, n_u), covariances
    ``Sigma`` (d, n_u, n_u) and gating weights ``theta`` shaped per kind."""

    K: np.ndarray
    b: np.ndarray
    Sigma: np.ndarray
    theta: np.ndarray
    kind: str = GENERAL

    def __post_init__(self):
        if self.kind not in SWITCHING_KINDS:
            raise ArgumentError(f"unknown switching kind {self.kind!r}")
        K = _frozen(self.K)
        b = _frozen(self.b)
        Sigma = _frozen(self.Sigma)
        theta = _frozen(self.theta)
        if K.ndim != 3:
            raise ArgumentError("K must have shape (d, n_u, n_z)")
        d, n_u, n_z = K.shape
        if d < 1 or n_u < 1:
            raise ArgumentError("need at least one mode and one input")
        if b.shape != (d, n_u):
            raise ArgumentError(f"b must have shape {(d, n_u)}, got {b.shape}")
        if Sigma.shape != (d, n_u, n_u):
            raise ArgumentError(f"Sigma must have shape {(d, n_u, n_u)}, got {Sigma.shape}")
        expected = theta_shape(self.kind, d, n_z)
        if theta.shape != expected:
            raise ArgumentError(f"{self.kind} gating needs shape {expected}, got {theta.shape}")
        for i in range(d):
            if not np.allclose(Sigma[i], Sigma[i].T, rtol=0, atol=1e-12 * max(1.0, np.abs(Sigma[i]).max())):
                raise NumericDomainError("covariance is not symmetric", i)
            chol_pd(Sigma[i], i)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "theta", theta)

    @property
    def d(self) -> int:
        return self.K.shape[0]

    @property
    def n_u(self) -> int:
        return self.K.shape[1]

    @property
    def n_z(self) -> int:
        return self.K.shape[2]

    @cached_property
    def chol(self):
        return np.stack([chol_pd(self.Sigma[i], i) for i in range(self.d)])

    def blocks(self):
        return theta_blocks(self.kind, self.theta, self.d)

    def theta_full(self):
        """Gating weights broadcast to the general ``(d, n_feat, d)`` shape."""
        B = self.blocks()
        return np.broadcast_to(B, (self.d,) + B.shape[1:])

    def replace(self, **kw) -> "PolicyParams":
        data = dict(K=self.K, b=self.b, Sigma=self.Sigma, theta=self.theta, kind=self.kind)
        data.update(kw)
        return PolicyParams(**data)

    def permuted(self, perm) -> "PolicyParams":
        """Relabel modes: new mode ``k`` is old mode ``perm[k]``."""
        perm = np.asarray(perm)
        th = self.theta
        if self.kind == GENERAL:
            th = th[perm][:, :, perm]
        elif self.kind == MODE_DEPENDENT:
            th = th[perm][:, perm]
        else:
            th = th[..., perm]
        return PolicyParams(self.K[perm], self.b[perm], self.Sigma[perm], th, self.kind)

    def to_dict(self):
        return {
            "version": PARAMS_VERSION,
            "switching_kind": self.kind,
            "shape": {"d": self.d, "n_u": self.n_u, "n_z": self.n_z, "theta": list(self.theta.shape)},
            "K": self.K.tolist(),
            "b": self.b.tolist(),
            "Sigma": self.Sigma.tolist(),
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "PolicyParams":
        if doc.get("version") != PARAMS_VERSION:
            raise FormatError(f"expected version {PARAMS_VERSION!r}, got {doc.get('version')!r}")
        try:
            shape = doc["shape"]
            p = cls(
                K=np.array(doc["K"], dtype=float).reshape(shape["d"], shape["n_u"], shape["n_z"]),
                b=np.array(doc["b"], dtype=float).reshape(shape["d"], shape["n_u"]),
                Sigma=np.array(doc["Sigma"], dtype=float).reshape(shape["d"], shape["n_u"], shape["n_u"]),
                theta=np.array(doc["theta"], dtype=float).reshape(shape["theta"]),
                kind=doc["switching_kind"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed parameter document: {exc}") from exc
        return p

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def gate_probs(params: PolicyParams, z, prev) -> np.ndarray:
    """Categorical distribution of the next mode given ``z`` and the previous mode."""
    d = params.d
    prev = check_mode(prev, d)
    kind = params.kind
    th = params.theta
    if kind == STATIC:
        return softmax(th[0])
    if kind == MODE_DEPENDENT:
        return softmax(th[prev])
    z = _as_z(z)
    if z.shape != (params.n_z,):
        raise ArgumentError(f"z has shape {z.shape}, gating expects ({params.n_z},)")
    if kind == STATE_DEPENDENT:
        return softmax(th.T @ z)
    return softmax(th[prev].T @ z)


def gate_features(kind, Z):
    """Features seen by the gate: ``Z`` itself or a constant column."""
    Z = np.atleast_2d(Z)
    if uses_z(kind):
        return Z
    return np.ones((Z.shape[0], 1))


def gate_log_probs(params: PolicyParams, Z) -> np.ndarray:
    """Log transition matrices for every row of ``Z``: shape ``(N, d, d)``
    indexed ``[t, prev, next]``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if uses_z(params.kind) and Z.shape[1] != params.n_z:
        raise ArgumentError(f"Z has {Z.shape[1]} columns, gating expects {params.n_z}")
    F = gate_features(params.kind, Z)
    logits = np.einsum("tf,sfj->tsj", F, params.blocks())
    logp = log_softmax_rows(logits)
    return np.broadcast_to(logp, (Z.shape[0], params.d, params.d))


def expert_means(params: PolicyParams, Z) -> np.ndarray:
    """Mean input of every expert for every row of ``Z``: ``(N, d, n_u)``."""
    return np.einsum("iuz,tz->tiu", params.K, Z) + params.b[None]


def emission_loglik(params: PolicyParams, Z, U) -> np.ndarray:
    """``log N(u_t; K_i z_t + b_i, Sigma_i)`` for all t, i: shape ``(N, d)``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if Z.shape[1] != params.n_z or U.shape[1] != params.n_u or Z.shape[0] != U.shape[0]:
        raise ArgumentError("Z/U shapes inconsistent with parameters")
    M = expert_means(params, Z)
    out = np.empty((Z.shape[0], params.d))
    for i in range(params.d):
        out[:, i] = gauss_logpdf_rows(U, M[:, i], params.Sigma[i], i)
    return out


# ---------------------------------------------------------------------------
# natural parameters


@dataclass(frozen=True)
class NaturalParams:
    """``C_i = Sigma_i^{-1} [K_i b_i]`` (d, n_u, n_z+1) and ``Lam_i = Sigma_i^{-1}``."""

    C: np.ndarray
    Lam: np.ndarray

    def __post_init__(self):
        C = _frozen(self.C)
        Lam = _frozen(self.Lam)
        if C.ndim != 3 or Lam.ndim != 3 or Lam.shape != (C.shape[0], C.shape[1], C.shape[1]):
            raise ArgumentError("NaturalParams needs C (d, n_u, n_z+1) and Lam (d, n_u, n_u)")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Lam", Lam)

    @property
    def d(self):
        return self.C.shape[0]

    @property
    def n_u(self):
        return self.C.shape[1]

    @property
    def n_z(self):
        return self.C.shape[2] - 1

    @cached_property
    def chol(self):
        """Cholesky factors of every ``Lam_i``; raises if any is not PD."""
        return np.stack([chol_pd(self.Lam[i], i, "precision") for i in range(self.d)])


def to_natural(params: PolicyParams) -> NaturalParams:
    C = np.empty((params.d, params.n_u, params.n_z + 1))
    Lam = np.empty((params.d, params.n_u, params.n_u))
    for i in range(params.d):
        L = chol_pd(params.Sigma[i], i)
        Kb = np.column_stack([params.K[i], params.b[i]])
        C[i] = cho_solve((L, True), Kb)
        Li = cho_solve((L, True), np.eye(params.n_u))
        Lam[i] = 0.5 * (Li + Li.T)
    return NaturalParams(C, Lam)


def from_natural(nat: NaturalParams):
    """Return ``(K, b, Sigma)`` stacked over modes."""
    d, n_u = nat.d, nat.n_u
    K = np.empty((d, n_u, nat.n_z))
    b = np.empty((d, n_u))
    Sigma = np.empty((d, n_u, n_u))
    for i in range(d):
        L = chol_pd(nat.Lam[i], i, "precision")
        Kb = cho_solve((L, True), nat.C[i])
        K[i], b[i] = Kb[:, :-1], Kb[:, -1]
        S = cho_solve((L, True), np.eye(n_u))
        Sigma[i] = 0.5 * (S + S.T)
    return K, b, Sigma


def params_from_natural(nat: NaturalParams, theta, kind) -> PolicyParams:
    K, b, Sigma = from_natural(nat)
    return PolicyParams(K, b, Sigma, theta, kind)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    """Sampled states ``(T, n_x)`` with optional inputs ``(T, n_u)``,
    exogenous signals ``(T, n_e)`` and generator mode labels ``(T,)``."""

    states: np.ndarray
    dt: float
    inputs: Optional[np.ndarray] = None
    exogenous: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = _frozen(self.states)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ArgumentError("a trajectory needs at least two states")
        if not self.dt > 0:
            raise ArgumentError("dt must be positive")
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "dt", float(self.dt))
        for name in ("inputs", "exogenous"):
            a = getattr(self, name)
            if a is not None:
                a = _frozen(a)
                if a.ndim == 1:
                    a = _frozen(a[:, None])
                if a.shape[0] != X.shape[0]:
                    raise ArgumentError(f"{name} length {a.shape[0]} != states length {X.shape[0]}")
                object.__setattr__(self, name, a)
        if self.labels is not None:
            lab = _frozen(self.labels, dtype=int)
            if lab.shape != (X.shape[0],):
                raise ArgumentError("labels must have one entry per state")
            object.__setattr__(self, "labels", lab)

    @property
    def T(self) -> int:
        return self.states.shape[0]

    def replace(self, **kw) -> "Trajectory":
        data = dict(states=self.states, dt=self.dt, inputs=self.inputs, exogenous=self.exogenous,
                    labels=self.labels, meta=dict(self.meta))
        data.update(kw)
        return Trajectory(**data)

    def window(self, start, stop) -> "Trajectory":
        sl = slice(start, stop)
        return Trajectory(
            self.states[sl], self.dt,
            None if self.inputs is None else self.inputs[sl],
            None if self.exogenous is None else self.exogenous[sl],
            None if self.labels is None else self.labels[sl],
            dict(self.meta),
        )
