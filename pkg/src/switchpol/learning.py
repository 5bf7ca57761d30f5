"""Majorization-minimization fitting of the switching policy.

Each iteration smooths the mode posteriors at the current parameters and then
minimizes the convex surrogate plus regularizer, block by block:

* gating weights: weighted multinomial logistic regression, solved by damped
  Newton per previous-mode slot;
* experts: closed form in natural parameters, or a log-det barrier path when
  the common-Lyapunov LMI is imposed.

All objectives are normalized by the number of transitions ``sum (N - 1)``
and the regularizer is added unnormalized.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, LinAlgError

from .core import (GENERAL, MODE_DEPENDENT, STATE_DEPENDENT, STATIC, SWITCHING_KINDS, NaturalParams,
                   PolicyParams, chol_pd, from_natural, gate_features, log_softmax_rows, theta_blocks,
                   theta_from_blocks, theta_shape, to_natural, uses_prev_mode)
from .errors import (ArgumentError, FitError, NumericDomainError, SolverError, StabilityInfeasibleError,
                     SwitchpolError)
from .inference import PosteriorMarginals, SupervisedSequence, as_sequences, normalizer, posteriors
from .stability import StabilityCertificate, check_feasibility

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RegConfig:
    gamma1: float = 5e-6
    gamma2: float = 5e-6
    gamma3: float = 5e-6

    def validate(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ArgumentError("regularization weights must be strictly positive")
        return self


@dataclass(frozen=True)
class FitConfig:
    d: int = 3
    switching_kind: str = GENERAL
    stability: bool = False
    eps_margin: float = 1e-6
    max_iters: int = 200
    rel_tol: float = 1e-7
    n_starts: int = 1
    seed: int = 0
    init_strategy: str = "random-perturbed-global-fit"
    reg: RegConfig = field(default_factory=RegConfig)
    gating_tol: float = 1e-8
    gating_max_newton: int = 100
    mu0: float = 1e-2
    mu_shrink: float = 0.2
    mu_final: float = 1e-8
    barrier_newton_tol: float = 1e-12

    def validate(self):
        if self.d < 1:
            raise ArgumentError("d must be at least 1")
        if self.switching_kind not in SWITCHING_KINDS:
            raise ArgumentError(f"unknown switching kind {self.switching_kind!r}")
        if self.max_iters < 1 or self.n_starts < 1:
            raise ArgumentError("max_iters and n_starts must be at least 1")
        if min(self.rel_tol, self.gating_tol, self.mu0, self.mu_final, self.barrier_newton_tol) <= 0:
            raise ArgumentError("tolerances must be positive")
        if not 0 < self.mu_shrink < 1:
            raise ArgumentError("mu_shrink must lie in (0, 1)")
        if self.stability and self.eps_margin <= 0:
            raise ArgumentError("eps_margin must be positive when stability is on")
        self.reg.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "reg" in doc and not isinstance(doc["reg"], RegConfig):
            doc["reg"] = RegConfig(**doc["reg"])
        return cls(**doc)


# ---------------------------------------------------------------------------
# surrogate weights and statistics


@dataclass(frozen=True)
class SurrogateWeights:
    """Posterior snapshot (one entry per sequence) that defines a surrogate."""

    marginals: tuple

    @classmethod
    def from_params(cls, data, params: PolicyParams, prior0=None):
        posts, _ = posteriors(data, params, prior0)
        return cls(tuple(posts))


def _pairs_for_rows(w: SurrogateWeights, data):
    """Stack transition targets for rows 1..N-1 of every sequence.

    Returns gate features-ready regressors ``Z`` (rows with a predecessor) and
    pair weights ``(n, d, d)``.
    """
    Zs, Ps = [], []
    for seq, post in zip(data, w.marginals):
        if seq.N > 1:
            Zs.append(seq.Z[1:])
            Ps.append(post.pairs)
    return np.vstack(Zs), np.concatenate(Ps)


def _slot_targets(kind, pairs, d):
    """Aggregate pair weights into per-slot targets ``R[s, t, j]``."""
    if uses_prev_mode(kind):
        return np.transpose(pairs, (1, 0, 2))
    return pairs.sum(axis=1)[None]


def _multiplicity(kind, d):
    """How many of the ``d`` per-mode gating blocks one stored block stands for."""
    return 1 if kind in (GENERAL, MODE_DEPENDENT) else d


class GatingSurrogate:
    """Weighted cross-entropy of the gate against smoothed pair marginals."""

    def __init__(self, weights: SurrogateWeights, data, kind=GENERAL, d=None):
        data = as_sequences(data)
        self.kind = kind
        self.n = normalizer(data)
        Z, pairs = _pairs_for_rows(weights, data)
        self.d = pairs.shape[1] if d is None else d
        self.n_z = data[0].Z.shape[1]
        self.F = gate_features(kind, Z)
        self.R = _slot_targets(kind, pairs, self.d)  # (slots, n, d)
        self.c = self.R.sum(axis=2)  # (slots, n)

    def _slot_value_grad(self, s, th):
        logits = self.F @ th
        logp = log_softmax_rows(logits)
        val = -(self.R[s] * logp).sum()
        p = np.exp(logp)
        G = self.F.T @ (self.c[s][:, None] * p - self.R[s])
        return val / self.n, G / self.n

    def value(self, theta):
        B = theta_blocks(self.kind, np.asarray(theta, dtype=float), self.d)
        return float(sum(self._slot_value_grad(s, B[s])[0] for s in range(B.shape[0])))

    def grad(self, theta):
        B = theta_blocks(self.kind, np.asarray(theta, dtype=float), self.d)
        G = np.stack([self._slot_value_grad(s, B[s])[1] for s in range(B.shape[0])])
        return theta_from_blocks(self.kind, G, self.d, self.n_z)

    __call__ = value


def surrogate_gating(weights: SurrogateWeights, data, kind=GENERAL):
    return GatingSurrogate(weights, data, kind)


@dataclass(frozen=True)
class ExpertStats:
    """Per-mode weighted moments with weights ``q_t^i / sum(N - 1)``:
    ``W`` (d,), ``Szz`` (d, m, m), ``Szu`` (d, m, n_u), ``Suu`` (d, n_u, n_u)
    where ``m = n_z + 1`` (regressor with a trailing 1)."""

    W: np.ndarray
    Szz: np.ndarray
    Szu: np.ndarray
    Suu: np.ndarray

    @classmethod
    def from_weights(cls, weights: SurrogateWeights, data):
        data = as_sequences(data)
        n = normalizer(data)
        Zt = np.vstack([np.column_stack([s.Z, np.ones(s.N)]) for s in data])
        U = np.vstack([s.U for s in data])
        Q = np.vstack([p.singles for p in weights.marginals]) / n
        return cls.from_arrays(Zt, U, Q)

    @classmethod
    def from_arrays(cls, Zt, U, Q):
        W = Q.sum(axis=0)
        Szz = np.stack([(Zt * q[:, None]).T @ Zt for q in Q.T])
        Szu = np.stack([(Zt * q[:, None]).T @ U for q in Q.T])
        Suu = np.stack([(U * q[:, None]).T @ U for q in Q.T])
        return cls(W, Szz, Szu, Suu)


class ExpertSurrogate:
    """Expected negative Gaussian log-likelihood in natural parameters (without
    the parameter-free constant)."""

    def __init__(self, weights: SurrogateWeights, data):
        self.stats = ExpertStats.from_weights(weights, as_sequences(data))

    @staticmethod
    def _mode_value_grad(C, Lam, W, Szz, Szu, Suu, mode):
        L = chol_pd(Lam, mode, "precision")
        LinvC = np.linalg.solve(L, C)
        quad = np.einsum("ab,ab->", LinvC @ Szz, LinvC)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        val = 0.5 * (np.einsum("ab,ba->", Lam, Suu) - 2.0 * np.einsum("ab,ba->", C, Szu) + quad - W * logdet)
        Lam_inv_C = cho_solve((L, True), C)
        gC = Lam_inv_C @ Szz - Szu.T
        Lam_inv = cho_solve((L, True), np.eye(Lam.shape[0]))
        gLam = 0.5 * (Suu - Lam_inv_C @ Szz @ Lam_inv_C.T - W * Lam_inv)
        return val, gC, 0.5 * (gLam + gLam.T)

    def value(self, nat: NaturalParams):
        s = self.stats
        return float(sum(self._mode_value_grad(nat.C[i], nat.Lam[i], s.W[i], s.Szz[i], s.Szu[i], s.Suu[i], i)[0]
                         for i in range(nat.d)))

    def grad(self, nat: NaturalParams):
        s = self.stats
        out = [self._mode_value_grad(nat.C[i], nat.Lam[i], s.W[i], s.Szz[i], s.Szu[i], s.Suu[i], i)
               for i in range(nat.d)]
        return np.stack([o[1] for o in out]), np.stack([o[2] for o in out])

    __call__ = value


def surrogate_expert(weights: SurrogateWeights, data):
    return ExpertSurrogate(weights, data)


# ---------------------------------------------------------------------------
# regularizer


def reg_gating(theta, kind, d, cfg: RegConfig):
    theta = np.asarray(theta, dtype=float)
    return 0.5 * cfg.gamma1 * _multiplicity(kind, d) * float((theta ** 2).sum())


def reg_expert(nat: NaturalParams, cfg: RegConfig):
    total = 0.0
    for i in range(nat.d):
        L = chol_pd(nat.Lam[i], i, "precision")
        logdet = 2.0 * np.log(np.diag(L)).sum()
        LinvC = np.linalg.solve(L, nat.C[i])
        total += 0.5 * (cfg.gamma2 * (np.trace(nat.Lam[i]) - logdet) + cfg.gamma3 * float((LinvC ** 2).sum()))
    return total


def reg_expert_grad(nat: NaturalParams, cfg: RegConfig):
    gC = np.empty_like(nat.C)
    gLam = np.empty_like(nat.Lam)
    for i in range(nat.d):
        L = chol_pd(nat.Lam[i], i, "precision")
        Lam_inv = cho_solve((L, True), np.eye(nat.n_u))
        Lam_inv_C = Lam_inv @ nat.C[i]
        gC[i] = cfg.gamma3 * Lam_inv_C
        g = 0.5 * (cfg.gamma2 * (np.eye(nat.n_u) - Lam_inv) - cfg.gamma3 * Lam_inv_C @ Lam_inv_C.T)
        gLam[i] = 0.5 * (g + g.T)
    return gC, gLam


def regularizer(theta, nat: NaturalParams, cfg: RegConfig, kind=GENERAL):
    """Ridge on gating weights plus ``gamma2 (tr - logdet)`` and ``gamma3 |C|^2``
    penalties on the experts."""
    return reg_gating(theta, kind, nat.d, cfg) + reg_expert(nat, cfg)


def regularizer_params(params: PolicyParams, cfg: RegConfig):
    return regularizer(params.theta, to_natural(params), cfg, params.kind)


def objective(data, params: PolicyParams, cfg: RegConfig, prior0=None):
    """Normalized negative log-likelihood plus regularizer."""
    from .inference import neg_loglik
    return neg_loglik(data, params, prior0) + regularizer_params(params, cfg)


# ---------------------------------------------------------------------------
# gating minimization


def _newton_softmax(F, R, c, n, ridge, th0, tol, max_iter):
    """Minimize ``(1/n) sum_t [c_t lse(th^T f_t) - r_t^T th^T f_t] + ridge/2 |th|^2``."""
    nf, d = th0.shape
    th = th0.copy()

    def value_grad(th):
        logp = log_softmax_rows(F @ th)
        val = -(R * logp).sum() / n + 0.5 * ridge * (th ** 2).sum()
        p = np.exp(logp)
        g = F.T @ (c[:, None] * p - R) / n + ridge * th
        return val, g, p

    val, g, p = value_grad(th)
    for it in range(max_iter):
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            return th, val, gnorm, it
        H = np.empty((d, nf, d, nf))
        for j in range(d):
            for k in range(j, d):
                wjk = c * p[:, j] * ((j == k) - p[:, k])
                blk = (F * wjk[:, None]).T @ F / n
                H[j, :, k, :] = blk
                H[k, :, j, :] = blk.T
        H = H.reshape(d * nf, d * nf)
        H[np.diag_indices_from(H)] += ridge
        gv = g.T.reshape(-1)
        try:
            step = -cho_solve(cho_factor(H), gv)
        except LinAlgError:
            step = -np.linalg.lstsq(H, gv, rcond=None)[0]
        slope = gv @ step
        if slope >= 0:
            step, slope = -gv, -gv @ gv
        step = step.reshape(d, nf).T
        t = 1.0
        while True:
            new = th + t * step
            nval, ng, npr = value_grad(new)
            if nval <= val + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                if gnorm <= np.sqrt(tol):
                    return th, val, gnorm, it
                raise SolverError("gating line search failed",
                                  {"gradient_norm": float(gnorm), "objective": float(val), "iteration": it})
        if nval > val:
            return th, val, gnorm, it
        th, val, g, p = new, nval, ng, npr
    gnorm = np.linalg.norm(g)
    if gnorm <= np.sqrt(tol):
        warnings.warn(f"gating step stopped at gradient norm {gnorm:.2e} after {max_iter} Newton steps")
        return th, val, gnorm, max_iter
    raise SolverError("gating Newton iterations exhausted", {"gradient_norm": float(gnorm)})


def solve_gating_step(weights: SurrogateWeights, data, cfg: FitConfig, theta0=None, return_info=False):
    """Minimize gating surrogate + ridge for the configured switching kind."""
    data = as_sequences(data)
    d, kind = cfg.d, cfg.switching_kind
    n_z = data[0].Z.shape[1]
    shape = theta_shape(kind, d, n_z)
    if d == 1:
        th = np.zeros(shape)
        return (th, {"gradient_norm": 0.0, "iterations": 0}) if return_info else th
    sur = GatingSurrogate(weights, data, kind, d)
    B0 = theta_blocks(kind, np.zeros(shape) if theta0 is None else np.asarray(theta0, dtype=float), d)
    ridge = cfg.reg.gamma1 * _multiplicity(kind, d)
    blocks = np.empty_like(B0)
    gn, iters = 0.0, 0
    for s in range(B0.shape[0]):
        th, _, g, it = _newton_softmax(sur.F, sur.R[s], sur.c[s], sur.n, ridge, B0[s], cfg.gating_tol,
                                       cfg.gating_max_newton)
        blocks[s] = th
        gn = max(gn, g)
        iters += it
    theta = theta_from_blocks(kind, blocks, d, n_z)
    if return_info:
        return theta, {"gradient_norm": gn, "iterations": iters}
    return theta


def gating_objective(weights, data, cfg: FitConfig, theta):
    sur = GatingSurrogate(weights, as_sequences(data), cfg.switching_kind, cfg.d)
    return sur.value(theta) + reg_gating(theta, cfg.switching_kind, cfg.d, cfg.reg)


# ---------------------------------------------------------------------------
# expert minimization


def expert_closed_form(stats: ExpertStats, reg: RegConfig):
    """Stationary point of the expert surrogate + regularizer for every mode."""
    d, m, n_u = stats.Szu.shape
    C = np.empty((d, n_u, m))
    Lam = np.empty((d, n_u, n_u))
    for i in range(d):
        G = stats.Szz[i] + reg.gamma3 * np.eye(m)
        try:
            cf = cho_factor(G)
        except LinAlgError:
            raise NumericDomainError("regressor Gram matrix is singular", i) from None
        B = cho_solve(cf, stats.Szu[i]).T
        Sig = (stats.Suu[i] - B @ stats.Szu[i] + reg.gamma2 * np.eye(n_u)) / (stats.W[i] + reg.gamma2)
        Sig = 0.5 * (Sig + Sig.T)
        L = chol_pd(Sig, i)
        Lam_i = cho_solve((L, True), np.eye(n_u))
        Lam[i] = 0.5 * (Lam_i + Lam_i.T)
        C[i] = Lam[i] @ B
    return NaturalParams(C, Lam)


def expert_objective(stats: ExpertStats, nat: NaturalParams, reg: RegConfig):
    """Expert surrogate plus its regularizer, evaluated from moments."""
    total = 0.0
    for i in range(nat.d):
        v, _, _ = ExpertSurrogate._mode_value_grad(nat.C[i], nat.Lam[i], stats.W[i], stats.Szz[i],
                                                    stats.Szu[i], stats.Suu[i], i)
        total += v
    return total + reg_expert(nat, reg)


def expert_objective_grad(stats: ExpertStats, nat: NaturalParams, reg: RegConfig):
    gC = np.empty_like(nat.C)
    gLam = np.empty_like(nat.Lam)
    for i in range(nat.d):
        _, gC[i], gLam[i] = ExpertSurrogate._mode_value_grad(nat.C[i], nat.Lam[i], stats.W[i], stats.Szz[i],
                                                              stats.Szu[i], stats.Suu[i], i)
    rC, rLam = reg_expert_grad(nat, reg)
    return gC + rC, gLam + rLam


def solve_expert_step_unconstrained(weights: SurrogateWeights, data, cfg: FitConfig) -> NaturalParams:
    stats = ExpertStats.from_weights(weights, as_sequences(data))
    return expert_closed_form(stats, cfg.reg)


def _sym_basis(n):
    out = []
    for a in range(n):
        for b in range(a, n):
            E = np.zeros((n, n))
            E[a, b] = E[b, a] = 1.0
            out.append(E)
    return np.array(out)


class _ReducedBarrier:
    """Barrier subproblem in ``(S_i, Lam_i)`` per mode and a shared ``P``.

    The non-u-lag columns of ``C_i`` are eliminated in closed form, which
    leaves, per mode and up to a constant,

        1/2 [tr(Lam M) - c logdet Lam + tr(Lam^{-1} S G S^T) - 2 tr(S L)]

    with ``G`` a Schur complement of the regularized Gram matrix.
    """

    def __init__(self, stats: ExpertStats, reg: RegConfig, n_u, eps):
        d, m, _ = stats.Szu.shape
        self.d, self.n_u, self.m, self.eps = d, n_u, m, eps
        r = slice(n_u, m)
        s = slice(0, n_u)
        self.M, self.G, self.LG, self.Lin, self.c, self.Rmap = [], [], [], [], [], []
        for i in range(d):
            Gfull = stats.Szz[i] + reg.gamma3 * np.eye(m)
            Grr = Gfull[r, r]
            cf = cho_factor(Grr)
            Zs, Zr = stats.Szu[i][s], stats.Szu[i][r]
            Grr_inv_Zr = cho_solve(cf, Zr)
            Grr_inv_Grs = cho_solve(cf, Gfull[r, s])
            M = stats.Suu[i] + reg.gamma2 * np.eye(n_u) - Zr.T @ Grr_inv_Zr
            G = Gfull[s, s] - Gfull[s, r] @ Grr_inv_Grs
            G = 0.5 * (G + G.T)
            self.M.append(0.5 * (M + M.T))
            self.G.append(G)
            self.LG.append(cholesky(G, lower=True))
            self.Lin.append(Zs - Gfull[s, r] @ Grr_inv_Zr)
            self.c.append(stats.W[i] + reg.gamma2)
            # R = (Lam Zr^T - S G_sr) Grr^{-1}
            self.Rmap.append((Grr_inv_Zr.T, Grr_inv_Grs.T))
        n_u2 = n_u * n_u
        self.Esym = _sym_basis(n_u)
        ns = self.Esym.shape[0]
        self.ns = ns
        self.per_mode = n_u2 + ns
        self.nvar = d * self.per_mode + ns
        # local directions: S entries, Lam entries, P entries
        nl = n_u2 + 2 * ns
        dS = np.zeros((nl, n_u, n_u))
        dL = np.zeros((nl, n_u, n_u))
        dP = np.zeros((nl, n_u, n_u))
        for k in range(n_u2):
            dS[k].flat[k] = 1.0
        dL[n_u2:n_u2 + ns] = self.Esym
        dP[n_u2 + ns:] = self.Esym
        self.dS, self.dL, self.dP = dS, dL, dP
        top = np.concatenate([dP, np.transpose(dS, (0, 2, 1))], axis=2)
        bot = np.concatenate([dS, 2 * dL - dP], axis=2)
        self.dB = np.concatenate([top, bot], axis=1)
        self.local_index = [np.concatenate([np.arange(i * self.per_mode, (i + 1) * self.per_mode),
                                            np.arange(d * self.per_mode, self.nvar)]) for i in range(d)]

    # -- packing ---------------------------------------------------------------

    def _svec(self, X):
        n = self.n_u
        iu = np.triu_indices(n)
        return X[iu]

    def _unsvec(self, v):
        return np.einsum("k,kab->ab", v, self.Esym)

    def pack(self, S, Lam, P):
        parts = []
        for i in range(self.d):
            parts += [S[i].reshape(-1), self._svec(Lam[i])]
        parts.append(self._svec(P))
        return np.concatenate(parts)

    def unpack(self, x):
        n_u2 = self.n_u * self.n_u
        S, Lam = [], []
        for i in range(self.d):
            o = i * self.per_mode
            S.append(x[o:o + n_u2].reshape(self.n_u, self.n_u))
            Lam.append(self._unsvec(x[o + n_u2:o + self.per_mode]))
        P = self._unsvec(x[self.d * self.per_mode:])
        return np.array(S), np.array(Lam), P

    def blocks(self, S, Lam, P):
        out = []
        for i in range(self.d):
            B = np.block([[P, S[i].T], [S[i], 2 * Lam[i] - P]])
            out.append(0.5 * (B + B.T) - self.eps * np.eye(2 * self.n_u))
        return out

    def feasible(self, x):
        S, Lam, P = self.unpack(x)
        try:
            for B in self.blocks(S, Lam, P):
                cholesky(B, lower=True)
            cholesky(P - self.eps * np.eye(self.n_u), lower=True)
            for i in range(self.d):
                cholesky(Lam[i], lower=True)
        except LinAlgError:
            return False
        return True

    # -- objective -------------------------------------------------------------

    def value(self, x, mu):
        """Objective plus ``mu`` times the barrier; ``inf`` when infeasible."""
        S, Lam, P = self.unpack(x)
        total = 0.0
        try:
            for i in range(self.d):
                LL = cholesky(Lam[i], lower=True)
                Y = S[i] @ self.LG[i]
                W = np.linalg.solve(LL, Y)
                total += 0.5 * (np.einsum("ab,ba->", Lam[i], self.M[i]) - self.c[i] * 2 * np.log(np.diag(LL)).sum()
                                + (W * W).sum() - 2 * np.einsum("ab,ba->", S[i], self.Lin[i]))
            if mu > 0:
                for B in self.blocks(S, Lam, P):
                    total -= mu * 2 * np.log(np.diag(cholesky(B, lower=True))).sum()
                total -= mu * 2 * np.log(np.diag(cholesky(P - self.eps * np.eye(self.n_u), lower=True))).sum()
        except LinAlgError:
            return np.inf
        return total

    def grad_hess(self, x, mu):
        S, Lam, P = self.unpack(x)
        g = np.zeros(self.nvar)
        H = np.zeros((self.nvar, self.nvar))
        Bs = self.blocks(S, Lam, P)
        for i in range(self.d):
            idx = self.local_index[i]
            Li = np.linalg.inv(Lam[i])
            Y = S[i] @ self.LG[i]
            dY = self.dS @ self.LG[i]
            LiY = Li @ Y
            gl = 0.5 * (np.einsum("kab,ba->k", self.dL, self.M[i])
                        - self.c[i] * np.einsum("ab,kba->k", Li, self.dL)
                        + 2 * np.einsum("ab,kab->k", LiY, dY)
                        - np.einsum("ab,kbc,ca->k", LiY.T, self.dL, LiY)
                        - 2 * np.einsum("kab,ba->k", self.dS, self.Lin[i]))
            LdL = Li @ self.dL  # (k, n, n)
            V = dY - self.dL @ LiY
            Hl = 0.5 * (self.c[i] * np.einsum("kab,lba->kl", LdL, LdL)
                        + 2 * np.einsum("kab,ac,lcb->kl", V, Li, V))
            if mu > 0:
                Bi = np.linalg.inv(Bs[i])
                BdB = Bi @ self.dB
                gl -= mu * np.einsum("kaa->k", BdB)
                Hl += mu * np.einsum("kab,lba->kl", BdB, BdB)
            g[idx] += gl
            H[np.ix_(idx, idx)] += Hl
        if mu > 0:
            Pi = np.linalg.inv(P - self.eps * np.eye(self.n_u))
            PdP = Pi @ self.Esym
            ip = np.arange(self.d * self.per_mode, self.nvar)
            g[ip] -= mu * np.einsum("kaa->k", PdP)
            H[np.ix_(ip, ip)] += mu * np.einsum("kab,lba->kl", PdP, PdP)
        return g, 0.5 * (H + H.T)

    def newton(self, x, mu, tol, max_iter=200):
        f = self.value(x, mu)
        for it in range(max_iter):
            g, H = self.grad_hess(x, mu)
            try:
                step = -cho_solve(cho_factor(H), g)
            except LinAlgError:
                step = -np.linalg.lstsq(H, g, rcond=None)[0]
            dec = -g @ step
            if dec < 0:
                step, dec = -g, g @ g
            if 0.5 * dec <= tol:
                return x, f, it
            t = 1.0
            while True:
                xn = x + t * step
                fn = self.value(xn, mu)
                if np.isfinite(fn) and fn <= f - 0.25 * t * dec:
                    break
                t *= 0.5
                if t < 1e-14:
                    return x, f, it
            x, f = xn, fn
        raise SolverError("barrier Newton iterations exhausted", {"mu": mu, "decrement": float(dec)})

    def complete(self, S, Lam):
        """Rebuild full natural parameters from the reduced variables."""
        C = np.empty((self.d, self.n_u, self.m))
        for i in range(self.d):
            ZrT_Grr_inv, Gsr_Grr_inv = self.Rmap[i]
            R = Lam[i] @ ZrT_Grr_inv - S[i] @ Gsr_Grr_inv
            C[i, :, :self.n_u] = S[i]
            C[i, :, self.n_u:] = R
        return NaturalParams(C, np.array([0.5 * (L + L.T) for L in Lam]))


def _feasible_start(nat: NaturalParams, n_u, rho=0.9):
    """Lam = I, u-lag block scaled to spectral norm <= rho, P = I."""
    A = np.array([np.linalg.solve(nat.Lam[i], nat.C[i][:, :n_u]) for i in range(nat.d)])
    amax = max(np.linalg.norm(a, 2) for a in A)
    scale = min(1.0, rho / (amax + 1e-12))
    S = A * scale
    Lam = np.array([np.eye(n_u)] * nat.d)
    return S, Lam, np.eye(n_u)


def stable_expert_solve(stats: ExpertStats, cfg: FitConfig, start: Optional[tuple] = None):
    """Barrier-path minimization of expert surrogate + regularizer under the
    Lyapunov LMI.  ``start`` is an optional ``(NaturalParams, P)`` warm start
    used when strictly feasible.  Returns ``(NaturalParams, P)``."""
    d, m, n_u = stats.Szu.shape
    eps = cfg.eps_margin
    prob = _ReducedBarrier(stats, cfg.reg, n_u, eps)
    x = None
    if start is not None:
        nat0, P0 = start
        cand = prob.pack(nat0.C[:, :, :n_u], nat0.Lam, np.asarray(P0, dtype=float))
        if prob.feasible(cand):
            x = cand
    if x is None:
        free = expert_closed_form(stats, cfg.reg)
        x = prob.pack(*_feasible_start(free, n_u))
        if not prob.feasible(x):
            raise StabilityInfeasibleError("could not construct a strictly feasible starting point")
    mu = cfg.mu0
    while True:
        x, _, _ = prob.newton(x, mu, cfg.barrier_newton_tol)
        if mu <= cfg.mu_final:
            break
        mu = max(mu * cfg.mu_shrink, cfg.mu_final)
    S, Lam, P = prob.unpack(x)
    return prob.complete(S, Lam), P


def solve_expert_step_stable(weights: SurrogateWeights, data, cfg: FitConfig, start=None):
    data = as_sequences(data)
    layout = data[0].layout
    n_u = data[0].U.shape[1]
    if layout is not None:
        from .stability import _check_layout
        _check_layout(layout, n_u)
    stats = ExpertStats.from_weights(weights, data)
    return stable_expert_solve(stats, cfg, start)


# ---------------------------------------------------------------------------
# initialization


def _global_ridge(data, reg: RegConfig):
    Zt = np.vstack([np.column_stack([s.Z, np.ones(s.N)]) for s in data])
    U = np.vstack([s.U for s in data])
    Q = np.full((Zt.shape[0], 1), 1.0 / normalizer(data))
    return expert_closed_form(ExpertStats.from_arrays(Zt, U, Q), reg)


def initialize(data, d, seed=0, strategy="random-perturbed-global-fit", kind=GENERAL, reg=None,
               perturbation=0.5) -> PolicyParams:
    """Starting parameters for one EM run; deterministic given ``seed``."""
    data = as_sequences(data)
    reg = reg or RegConfig()
    n_z = data[0].Z.shape[1]
    n_u = data[0].U.shape[1]
    rng = np.random.default_rng(seed)
    if strategy == "random-perturbed-global-fit":
        K0, b0, S0 = from_natural(_global_ridge(data, reg))
        if d == 1:
            return PolicyParams(K0, b0, S0, np.zeros(theta_shape(kind, 1, n_z)), kind)
        Z = np.vstack([s.Z for s in data])
        U = np.vstack([s.U for s in data])
        su = U.std(axis=0) + 1e-12
        sz = Z.std(axis=0)
        sz = np.where(sz > 1e-12, sz, 1.0)
        K = K0 + perturbation * rng.normal(size=(d, n_u, n_z)) * (su[:, None] / sz[None, :]) / np.sqrt(n_z)
        b = b0 + perturbation * rng.normal(size=(d, n_u)) * su
        Sigma = np.repeat(S0, d, axis=0)
        shape = theta_shape(kind, d, n_z)
        th = 0.01 * rng.normal(size=shape)
        if kind in (GENERAL, STATE_DEPENDENT):
            th = th / (sz[:, None] if kind == STATE_DEPENDENT else sz[None, :, None])
        return PolicyParams(K, b, Sigma, th, kind)
    if strategy == "random-responsibilities":
        # temporally coherent random soft assignments, then one M-step
        posts = []
        for s in data:
            n_blocks = max(1, s.N // 20)
            hard = rng.integers(d, size=n_blocks)
            rows = np.minimum(np.arange(s.N) // 20, n_blocks - 1)
            Q = 0.2 / d + 0.8 * np.eye(d)[hard[rows]]
            pairs = Q[:-1, :, None] * Q[1:, None, :]
            posts.append(PosteriorMarginals(Q, pairs))
        w = SurrogateWeights(tuple(posts))
        cfg = FitConfig(d=d, switching_kind=kind, reg=reg)
        K, b, Sigma = from_natural(solve_expert_step_unconstrained(w, data, cfg))
        theta = solve_gating_step(w, data, cfg)
        return PolicyParams(K, b, Sigma, theta, kind)
    if strategy == "segment-split":
        K = np.empty((d, n_u, n_z))
        b = np.empty((d, n_u))
        Sigma = np.empty((d, n_u, n_u))
        for j in range(d):
            parts = []
            for s in data:
                edges = np.linspace(0, s.N, d + 1).astype(int)
                if edges[j + 1] > edges[j]:
                    parts.append(SupervisedSequence(s.Z[edges[j]:edges[j + 1]], s.U[edges[j]:edges[j + 1]]))
            Zt = np.vstack([np.column_stack([p.Z, np.ones(p.N)]) for p in parts])
            U = np.vstack([p.U for p in parts])
            Q = np.full((Zt.shape[0], 1), 1.0 / max(Zt.shape[0] - 1, 1))
            Kj, bj, Sj = from_natural(expert_closed_form(ExpertStats.from_arrays(Zt, U, Q), reg))
            K[j], b[j], Sigma[j] = Kj[0], bj[0], Sj[0]
        return PolicyParams(K, b, Sigma, np.zeros(theta_shape(kind, d, n_z)), kind)
    raise ArgumentError(f"unknown initialization strategy {strategy!r}")


# ---------------------------------------------------------------------------
# EM loop


@dataclass
class FitReport:
    params: PolicyParams
    trace: list
    start_objectives: list
    best_seed: int
    wall_time: float
    certificate: Optional[StabilityCertificate] = None
    warnings: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    selection: str = "training"
    start_traces: list = field(default_factory=list)
    start_errors: list = field(default_factory=list)

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "trace": [float(v) for v in self.trace],
            "start_objectives": [None if v is None else float(v) for v in self.start_objectives],
            "best_seed": self.best_seed,
            "wall_time": self.wall_time,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "warnings": list(self.warnings),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "selection": self.selection,
            "start_errors": list(self.start_errors),
        }

    def write_trace_csv(self, path):
        with open(path, "w") as f:
            f.write("iteration,objective\n")
            for k, v in enumerate(self.trace):
                f.write(f"{k},{v!r}\n")


def _starved_modes(weights: SurrogateWeights, data, d):
    n_rows = sum(s.N for s in data)
    mass = sum(p.singles.sum(axis=0) for p in weights.marginals)
    return [i for i in range(d) if mass[i] < 1e-8 * n_rows]


def fit_single(data, cfg: FitConfig, params0: PolicyParams, prior0=None):
    """One MM run from ``params0``.  Returns ``(params, trace, info)``."""
    data = as_sequences(data)
    n = normalizer(data)
    d = cfg.d
    if params0.d != d or params0.kind != cfg.switching_kind:
        raise ArgumentError("initial parameters do not match the fit configuration")
    params = params0
    nat = to_natural(params)
    P = None
    trace = []
    notes = []
    converged = False
    feasible = not cfg.stability
    expert_val = None
    it = 0
    while True:
        weights_posts, ll = posteriors(data, params, prior0)
        weights = SurrogateWeights(tuple(weights_posts))
        obj = -ll / n + regularizer(params.theta, nat, cfg.reg, params.kind)
        if feasible:
            trace.append(obj)
            if len(trace) >= 2 and trace[-2] - trace[-1] <= cfg.rel_tol * max(1.0, abs(trace[-1])):
                converged = True
                break
        if it >= cfg.max_iters:
            break
        for i in _starved_modes(weights, data, d):
            notes.append(f"iteration {it}: mode {i} starved")
        theta = solve_gating_step(weights, data, cfg, theta0=params.theta)
        stats = ExpertStats.from_weights(weights, data)
        if cfg.stability:
            start = (nat, P) if feasible else None
            new_nat, new_P = stable_expert_solve(stats, cfg, start)
            if feasible:
                old_val = expert_objective(stats, nat, cfg.reg)
                new_val = expert_objective(stats, new_nat, cfg.reg)
                if new_val > old_val:
                    new_nat, new_P = nat, P
            nat, P = new_nat, new_P
            feasible = True
        else:
            nat = expert_closed_form(stats, cfg.reg)
        K, b, Sigma = from_natural(nat)
        params = PolicyParams(K, b, Sigma, theta, cfg.switching_kind)
        it += 1
    cert = None
    if cfg.stability:
        rep = check_feasibility(nat, P, cfg.eps_margin)
        cert = rep.certificate
        if cert is None:
            raise SolverError("constrained fit ended without a valid certificate", {"failures": rep.failures})
    return params, trace, {"converged": converged, "n_iter": it, "certificate": cert, "warnings": notes}


def em_fit(data, cfg: FitConfig, init=None, validation=None, prior0=None) -> FitReport:
    """Multi-start MM fit.

    ``init`` may be a PolicyParams (used by the first start) or None; starts
    are seeded ``cfg.seed + k``.  The best start minimizes the validation
    negative log-likelihood when ``validation`` is given, else the training
    objective; ties go to the lowest seed.
    """
    from .inference import neg_loglik
    cfg.validate()
    data = as_sequences(data)
    t0 = time.perf_counter()
    results = []
    errors = []
    for k in range(cfg.n_starts):
        seed = cfg.seed + k
        try:
            if k == 0 and isinstance(init, PolicyParams):
                p0 = init
            else:
                p0 = initialize(data, cfg.d, seed, cfg.init_strategy, cfg.switching_kind, cfg.reg)
            params, trace, info = fit_single(data, cfg, p0, prior0)
            if validation is not None:
                score = neg_loglik(validation, params, prior0)
            else:
                score = trace[-1]
            results.append((score, seed, params, trace, info))
        except SwitchpolError as exc:
            log.warning("start with seed %d failed: %s", seed, exc)
            errors.append(f"seed {seed}: {exc}")
            results.append((None, seed, None, None, None))
    ok = [r for r in results if r[0] is not None and np.isfinite(r[0])]
    if not ok:
        raise FitError("all starts failed: " + "; ".join(errors))
    best = min(ok, key=lambda r: (r[0], r[1]))
    score, seed, params, trace, info = best
    return FitReport(
        params=params,
        trace=trace,
        start_objectives=[r[0] for r in results],
        best_seed=seed,
        wall_time=time.perf_counter() - t0,
        certificate=info["certificate"],
        warnings=info["warnings"],
        converged=info["converged"],
        n_iter=info["n_iter"],
        selection="validation" if validation is not None else "training",
        start_traces=[r[3] for r in results],
        start_errors=errors,
    )
