"""Common-Lyapunov certificates for the input recursion ``u_t = A_i u_{t-1} + ...``.

In natural parameters the u-lag gain block ``S(C_i) = Lam_i A_i`` enters the
linear matrix inequality

    [[P, S_i^T], [S_i, 2 Lam_i - P]] > 0,

which implies ``A_i^T P A_i - P < 0`` for every mode.  Strict inequalities
are checked against an explicit margin ``eps``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import HistoryLayout, NaturalParams, check_mode, chol_pd
from .errors import ArgumentError, LayoutError


def _check_layout(layout: Optional[HistoryLayout], n_u):
    if layout is None:
        return
    if layout.t_u != 1:
        raise LayoutError("stability constraints support exactly one input lag (t_u = 1)")
    layout.require_leading_u_lag(n_u)


def select_S(nat: NaturalParams, i, layout: Optional[HistoryLayout] = None):
    """First ``n_u`` columns of ``C_i`` (the precision-scaled u-lag gain)."""
    i = check_mode(i, nat.d)
    _check_layout(layout, nat.n_u)
    if nat.n_z < nat.n_u:
        raise LayoutError("z is narrower than one input block")
    return np.array(nat.C[i, :, :nat.n_u])


def select_A(nat: NaturalParams, i, layout: Optional[HistoryLayout] = None):
    """``A_i = Lam_i^{-1} S(C_i)``."""
    S = select_S(nat, i, layout)
    L = nat.chol[check_mode(i, nat.d)]
    return np.linalg.solve(L.T, np.linalg.solve(L, S))


def select_A_from_gains(K_i, n_u=None, layout: Optional[HistoryLayout] = None):
    K_i = np.atleast_2d(np.asarray(K_i, dtype=float))
    n_u = K_i.shape[0] if n_u is None else n_u
    _check_layout(layout, n_u)
    if K_i.shape[1] < n_u:
        raise LayoutError("z is narrower than one input block")
    return np.array(K_i[:, :n_u])


def lmi_block(C_i, Lam_i, P):
    """Symmetric ``2 n_u`` block of the Lyapunov LMI for one mode."""
    C_i = np.atleast_2d(np.asarray(C_i, dtype=float))
    Lam_i = np.atleast_2d(np.asarray(Lam_i, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n_u = Lam_i.shape[0]
    if Lam_i.shape != (n_u, n_u) or P.shape != (n_u, n_u) or C_i.shape[0] != n_u or C_i.shape[1] < n_u:
        raise ArgumentError("inconsistent shapes for lmi_block")
    S = C_i[:, :n_u]
    top = np.hstack([P, S.T])
    bot = np.hstack([S, 2.0 * Lam_i - P])
    B = np.vstack([top, bot])
    return 0.5 * (B + B.T)


def lyapunov_matrix(A, P):
    """``A^T P A - P`` (negative definite for a contraction in the P-norm)."""
    A = np.atleast_2d(A)
    M = A.T @ P @ A - P
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class StabilityCertificate:
    P: np.ndarray
    block_margins: np.ndarray
    direct_margins: np.ndarray
    p_margin: float
    eps: float

    def to_dict(self):
        return {
            "P": np.asarray(self.P).tolist(),
            "block_margins": np.asarray(self.block_margins).tolist(),
            "direct_margins": np.asarray(self.direct_margins).tolist(),
            "p_margin": float(self.p_margin),
            "eps": float(self.eps),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["P"], dtype=float), np.array(doc["block_margins"], dtype=float),
                   np.array(doc["direct_margins"], dtype=float), float(doc["p_margin"]), float(doc["eps"]))


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    block_margins: np.ndarray
    direct_margins: np.ndarray
    p_margin: float
    eps: float
    failures: list = field(default_factory=list)
    certificate: Optional[StabilityCertificate] = None


def check_feasibility(nat: NaturalParams, P, eps=1e-6) -> FeasibilityReport:
    """Evaluate every LMI block and the direct Lyapunov inequality.

    The report carries a certificate iff all block minima and ``lambda_min(P)``
    reach ``eps``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ArgumentError("P must be symmetric")
    P = 0.5 * (P + P.T)
    p_margin = float(np.linalg.eigvalsh(P)[0])
    blocks = np.empty(nat.d)
    direct = np.empty(nat.d)
    failures = []
    for i in range(nat.d):
        blocks[i] = np.linalg.eigvalsh(lmi_block(nat.C[i], nat.Lam[i], P))[0]
        try:
            A = select_A(nat, i)
            direct[i] = np.linalg.eigvalsh(lyapunov_matrix(A, P))[-1]
        except ArithmeticError:
            direct[i] = np.nan
        if blocks[i] < eps:
            failures.append(f"mode {i}: block margin {blocks[i]:.3e} < {eps:.1e}")
    if p_margin < eps:
        failures.append(f"P margin {p_margin:.3e} < {eps:.1e}")
    feasible = not failures
    cert = StabilityCertificate(P.copy(), blocks, direct, p_margin, eps) if feasible else None
    return FeasibilityReport(feasible, blocks, direct, p_margin, eps, failures, cert)


def p_norm(u, P):
    u = np.asarray(u, dtype=float)
    return np.sqrt(np.einsum("...a,ab,...b->...", u, P, u))


def contraction_rollout_test(A_set, P, n_steps=100, n_trials=10_000, seed=0, adversarial=True):
    """Largest one-step ratio ``|u_t|_P / |u_{t-1}|_P`` of the autonomous
    switched recursion ``u_t = A_{xi_t} u_{t-1}``.

    Mode sequences are uniform random; with ``adversarial`` an extra batch of
    trials picks, at every step, the mode that maximizes the ratio.  Ratios
    are taken as 0 where ``u_{t-1} = 0``.
    """
    A = np.asarray(A_set, dtype=float)
    if A.ndim == 2:
        A = A[None]
    P = np.atleast_2d(np.asarray(P, dtype=float))
    d, n_u = A.shape[0], A.shape[1]
    chol_pd(P, what="P")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_trials, n_u))
    worst = 0.0

    def ratio(new, old):
        num = p_norm(new, P)
        den = p_norm(old, P)
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    for _ in range(n_steps):
        modes = rng.integers(0, d, size=n_trials)
        new = np.einsum("nab,nb->na", A[modes], u)
        worst = max(worst, float(ratio(new, u).max()))
        # renormalize to avoid underflow over long horizons
        nrm = p_norm(new, P)
        u = np.where(nrm[:, None] > 0, new / np.where(nrm > 0, nrm, 1.0)[:, None], new)
    if adversarial:
        u = rng.normal(size=(min(n_trials, 1000), n_u))
        for _ in range(n_steps):
            cand = np.einsum("iab,nb->nia", A, u)
            r = ratio(cand, u[:, None, :])
            k = r.argmax(axis=1)
            worst = max(worst, float(r.max()))
            new = cand[np.arange(u.shape[0]), k]
            nrm = p_norm(new, P)
            u = np.where(nrm[:, None] > 0, new / np.where(nrm > 0, nrm, 1.0)[:, None], new)
    return worst
