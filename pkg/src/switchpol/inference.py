"""Exact posterior inference over mode sequences.

Conventions: a sequence holds rows ``t = 0..N-1`` (time ``tau + t``) of
regressors ``Z`` and estimated inputs ``U``.  Row ``t`` pairs ``u_t`` with
``z_t``; the mode at row 0 is drawn from ``prior0`` and every later mode from
the gate evaluated on ``(z_t, xi_{t-1})``.  The parameter-free dynamics factor
is left out of every likelihood value.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .core import HistoryLayout, PolicyParams, emission_loglik, gate_log_probs
from .errors import ArgumentError, CapacityError


@dataclass(frozen=True)
class SupervisedSequence:
    """Regressors ``Z`` (N, n_z) and estimated inputs ``U`` (N, n_u) starting
    at time index ``tau``."""

    Z: np.ndarray
    U: np.ndarray
    tau: int = 0
    layout: Optional[HistoryLayout] = None

    def __post_init__(self):
        Z = np.array(self.Z, dtype=float)
        U = np.array(self.U, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if Z.ndim != 2 or Z.shape[0] != U.shape[0] or Z.shape[0] < 1:
            raise ArgumentError("Z and U must be 2-D with the same nonzero number of rows")
        if self.layout is not None and self.layout.n_z != Z.shape[1]:
            raise ArgumentError("layout width does not match Z")
        if self.layout is not None and self.tau < max(self.layout.t_u, self.layout.t_x):
            raise ArgumentError("warm-up tau shorter than the history depth")
        Z.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "U", U)

    @property
    def N(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class PosteriorMarginals:
    """Smoothed ``singles[t, i]`` and pair marginals ``pairs[t, i, j]`` for the
    transition from row ``t`` to row ``t + 1``."""

    singles: np.ndarray
    pairs: np.ndarray

    def to_csv(self, singles_path, pairs_path):
        with open(singles_path, "w") as f:
            f.write("t,i,q\n")
            for t, row in enumerate(self.singles):
                for i, q in enumerate(row):
                    f.write(f"{t},{i},{q!r}\n")
        with open(pairs_path, "w") as f:
            f.write("t,i,j,q\n")
            for t, mat in enumerate(self.pairs):
                for i, row in enumerate(mat):
                    for j, q in enumerate(row):
                        f.write(f"{t},{i},{j},{q!r}\n")


def as_sequences(data) -> list:
    if isinstance(data, SupervisedSequence):
        return [data]
    data = list(data)
    if not data:
        raise ArgumentError("no sequences given")
    return data


def _prior(prior0, d):
    if prior0 is None:
        return np.full(d, 1.0 / d)
    p = np.asarray(prior0, dtype=float)
    if p.shape != (d,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ArgumentError("prior0 must be a probability vector of length d")
    return p


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


@numba.njit(cache=True)
def _lse_vec(v):
    m = v.max()
    if m == -np.inf:
        return m
    s = 0.0
    for k in range(v.shape[0]):
        s += np.exp(v[k] - m)
    return m + np.log(s)


@numba.njit(cache=True)
def _forward_backward(log_prior, log_emis, log_trans):
    N, d = log_emis.shape
    alpha = np.empty((N, d))
    beta = np.zeros((N, d))
    tmp = np.empty(d)
    for j in range(d):
        alpha[0, j] = log_prior[j] + log_emis[0, j]
    for t in range(1, N):
        for j in range(d):
            for i in range(d):
                tmp[i] = alpha[t - 1, i] + log_trans[t, i, j]
            alpha[t, j] = _lse_vec(tmp) + log_emis[t, j]
    loglik = _lse_vec(alpha[N - 1])
    for t in range(N - 2, -1, -1):
        for i in range(d):
            for j in range(d):
                tmp[j] = log_trans[t + 1, i, j] + log_emis[t + 1, j] + beta[t + 1, j]
            beta[t, i] = _lse_vec(tmp)
    # each slice is normalized on its own so rounding in alpha/beta cannot
    # accumulate into the marginals over long sequences
    singles = np.empty((N, d))
    for t in range(N):
        for i in range(d):
            tmp[i] = alpha[t, i] + beta[t, i]
        c = _lse_vec(tmp)
        for i in range(d):
            singles[t, i] = np.exp(tmp[i] - c)
    pairs = np.empty((max(N - 1, 0), d, d))
    lp = np.empty(d * d)
    for t in range(N - 1):
        for i in range(d):
            for j in range(d):
                lp[i * d + j] = (alpha[t, i] + log_trans[t + 1, i, j] + log_emis[t + 1, j]
                                 + beta[t + 1, j])
        c = _lse_vec(lp)
        for i in range(d):
            for j in range(d):
                pairs[t, i, j] = np.exp(lp[i * d + j] - c)
    return singles, pairs, loglik


@numba.njit(cache=True)
def _forward_filter(log_prior, log_emis, log_trans):
    N, d = log_emis.shape
    filt = np.empty((N, d))
    prev = np.empty(d)
    tmp = np.empty(d)
    for j in range(d):
        prev[j] = log_prior[j] + log_emis[0, j]
    c = _lse_vec(prev)
    for j in range(d):
        prev[j] -= c
        filt[0, j] = np.exp(prev[j])
    cur = np.empty(d)
    for t in range(1, N):
        for j in range(d):
            for i in range(d):
                tmp[i] = prev[i] + log_trans[t, i, j]
            cur[j] = _lse_vec(tmp) + log_emis[t, j]
        c = _lse_vec(cur)
        for j in range(d):
            prev[j] = cur[j] - c
            filt[t, j] = np.exp(prev[j])
    return filt


def _terms(seq: SupervisedSequence, params: PolicyParams):
    if seq.Z.shape[1] != params.n_z or seq.U.shape[1] != params.n_u:
        raise ArgumentError(
            f"sequence dims (n_z={seq.Z.shape[1]}, n_u={seq.U.shape[1]}) do not match parameters "
            f"(n_z={params.n_z}, n_u={params.n_u})")
    log_emis = emission_loglik(params, seq.Z, seq.U)
    log_trans = np.ascontiguousarray(gate_log_probs(params, seq.Z))
    return log_emis, log_trans


def forward_backward(seq: SupervisedSequence, params: PolicyParams, prior0=None):
    """Smoothed marginals and the exact log-likelihood of one sequence."""
    log_prior = _log(_prior(prior0, params.d))
    log_emis, log_trans = _terms(seq, params)
    singles, pairs, loglik = _forward_backward(log_prior, log_emis, log_trans)
    return PosteriorMarginals(singles, pairs), float(loglik)


def forward_filter(seq: SupervisedSequence, params: PolicyParams, prior0=None):
    """Filtered mode probabilities ``p(xi_t | u_0..u_t)`` for every row."""
    log_prior = _log(_prior(prior0, params.d))
    log_emis, log_trans = _terms(seq, params)
    return _forward_filter(log_prior, log_emis, log_trans)


def normalizer(data) -> int:
    """Total number of transitions ``sum (N - 1)`` used to scale objectives."""
    n = sum(s.N - 1 for s in as_sequences(data))
    if n < 1:
        raise ArgumentError("normalized objectives need at least one transition")
    return n


def loglik_batch(data, params: PolicyParams, prior0=None) -> float:
    return float(sum(forward_backward(s, params, prior0)[1] for s in as_sequences(data)))


def neg_loglik(data, params: PolicyParams, prior0=None) -> float:
    """``-loglik / sum(N - 1)`` over one or several sequences."""
    data = as_sequences(data)
    return -loglik_batch(data, params, prior0) / normalizer(data)


def posteriors(data, params: PolicyParams, prior0=None):
    """Per-sequence marginals plus the summed log-likelihood."""
    out, total = [], 0.0
    for s in as_sequences(data):
        post, ll = forward_backward(s, params, prior0)
        out.append(post)
        total += ll
    return out, total


# ---------------------------------------------------------------------------
# exhaustive oracle

MAX_ENUMERATION = 10 ** 7


def _enumerate(seq, params, prior0, chunk=100_000):
    d, N = params.d, seq.N
    if d ** N > MAX_ENUMERATION:
        raise CapacityError(f"{d}^{N} mode sequences exceed the enumeration cap {MAX_ENUMERATION}")
    log_prior = _log(_prior(prior0, d))
    log_emis, log_trans = _terms(seq, params)
    it = itertools.product(range(d), repeat=N)
    rows = np.arange(N)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            return
        block = block.reshape(-1, N)
        lj = log_prior[block[:, 0]] + log_emis[rows, block].sum(axis=1)
        if N > 1:
            lj = lj + log_trans[rows[1:], block[:, :-1], block[:, 1:]].sum(axis=1)
        yield block, lj


def brute_force_loglik(seq: SupervisedSequence, params: PolicyParams, prior0=None) -> float:
    """Log of the sum over every mode sequence of the joint density."""
    parts = [np.logaddexp.reduce(lj) for _, lj in _enumerate(seq, params, prior0)]
    return float(np.logaddexp.reduce(parts))


def brute_force_posterior(seq: SupervisedSequence, params: PolicyParams, prior0=None):
    """Exhaustive marginals and log-likelihood (small instances only)."""
    blocks = list(_enumerate(seq, params, prior0))
    ll = float(np.logaddexp.reduce([np.logaddexp.reduce(lj) for _, lj in blocks]))
    d, N = params.d, seq.N
    singles = np.zeros((N, d))
    pairs = np.zeros((max(N - 1, 0), d, d))
    for block, lj in blocks:
        w = np.exp(lj - ll)
        for t in range(N):
            np.add.at(singles[t], block[:, t], w)
        for t in range(N - 1):
            np.add.at(pairs[t], (block[:, t], block[:, t + 1]), w)
    return PosteriorMarginals(singles, pairs), ll
