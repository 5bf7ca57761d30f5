"""Random instances shared by the test modules."""
import numpy as np

from switchpol.core import GENERAL, HistoryLayout, PolicyParams, theta_shape
from switchpol.inference import SupervisedSequence


def random_spd(rng, n, lo=0.3, hi=2.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T


def random_params(rng, d, n_z, n_u=2, kind=GENERAL, gate_scale=1.0, sig_lo=0.3, sig_hi=2.0):
    K = rng.normal(size=(d, n_u, n_z))
    b = rng.normal(size=(d, n_u))
    Sigma = np.array([random_spd(rng, n_u, sig_lo, sig_hi) for _ in range(d)])
    theta = gate_scale * rng.normal(size=theta_shape(kind, d, n_z))
    return PolicyParams(K, b, Sigma, theta, kind)


def random_seq(rng, N, n_z, n_u=2, scale=1.0):
    return SupervisedSequence(scale * rng.normal(size=(N, n_z)), scale * rng.normal(size=(N, n_u)))


def sampled_seq(rng, params: PolicyParams, N):
    """Rows drawn from ``params`` with i.i.d. standard-normal regressors."""
    Z = rng.normal(size=(N, params.n_z))
    U = np.empty((N, params.n_u))
    from switchpol.core import gate_probs
    mode = int(rng.integers(params.d))
    for t in range(N):
        if t:
            mode = int(rng.choice(params.d, p=gate_probs(params, Z[t], mode)))
        U[t] = params.K[mode] @ Z[t] + params.b[mode] + params.chol[mode] @ rng.normal(size=params.n_u)
    return SupervisedSequence(Z, U)


SCALAR_LAYOUT = HistoryLayout(n_u=1, t_u=1, n_x=1, t_x=0, n_exo=1)


def scalar_plant_data(K, Sigma, theta, T, seed, A=0.5, B=1.0, x0=(1.0,)):
    """Closed loop of a scalar plant under a switching policy with regressor ``[u_{t-1}, x_t, 1]``."""
    from switchpol.datagen import simulate_linear_plant
    policy = PolicyParams(np.asarray(K, float), np.zeros((len(K), 1)), np.asarray(Sigma, float),
                          np.asarray(theta, float))
    Z, U, X, labels = simulate_linear_plant(policy, A, B, T, seed=seed, x0=list(x0))
    return SupervisedSequence(Z, U, 1, SCALAR_LAYOUT), labels, policy


def sticky_theta(d, n_z, stay, leave, col=-1):
    """General-kind gate whose only active feature is column ``col`` (the constant)."""
    th = np.zeros((d, n_z, d))
    for i in range(d):
        th[i, col] = leave
        th[i, col, i] = stay
    return th


ACCEPTANCE_LINES = []


def report(number, title, ok, detail):
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
