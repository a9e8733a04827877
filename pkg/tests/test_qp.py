import itertools

import numpy as np
import pytest

from hpl.qp import INFEASIBLE, OPTIMAL, QPForm, qp_solve


def random_feasible_qp(rng, n, strictly_convex, max_rows=None):
    """QP whose constraints hold at a known random point.

    Problems that are not strictly convex get a box so they stay bounded.
    """
    M = rng.normal(size=(n, n))
    P = M @ M.T / n
    if strictly_convex:
        P += 0.1 * np.eye(n)
    else:
        P[:, -1] = P[-1, :] = 0.0  # one free direction, kept bounded by box rows
    q = rng.normal(size=n)
    x0 = rng.normal(size=n)
    m = int(rng.integers(n, (max_rows or 3 * n) + 1))
    A = rng.normal(size=(m, n))
    Ax = A @ x0
    l = Ax - rng.uniform(0.0, 1.0, m)
    u = Ax + rng.uniform(0.0, 1.0, m)
    l[rng.random(m) < 0.3] = -np.inf
    u[rng.random(m) < 0.3] = np.inf
    eq = rng.random(m) < 0.1
    l[eq] = u[eq] = Ax[eq]
    if not strictly_convex:
        A = np.vstack([A, np.eye(n)])
        l = np.concatenate([l, x0 - 5.0])
        u = np.concatenate([u, x0 + 5.0])
    return QPForm(P, q, A, l, u)


def kkt(qp, x, y):
    """KKT residuals recomputed from first principles."""
    Ax = qp.A @ x
    primal = max(0.0, float(np.max(qp.l - Ax)), float(np.max(Ax - qp.u)))
    stat = float(np.max(np.abs(qp.P @ x + qp.q + qp.A.T @ y)))
    comp = 0.0
    for i in range(len(y)):
        if y[i] > 0:
            comp = max(comp, abs(y[i] * (qp.u[i] - Ax[i])) if np.isfinite(qp.u[i]) else abs(y[i]))
        elif y[i] < 0:
            comp = max(comp, abs(y[i] * (Ax[i] - qp.l[i])) if np.isfinite(qp.l[i]) else abs(y[i]))
    return primal, stat, comp


def enumerate_active_sets(qp):
    """Optimal value by trying every active set (one bound per row)."""
    n = qp.n
    rows = []  # (a, b) meaning a.x <= b
    eqs = []
    for a, lo, hi in zip(qp.A, qp.l, qp.u):
        if lo == hi:
            eqs.append((a, lo))
            continue
        if np.isfinite(hi):
            rows.append((a, hi))
        if np.isfinite(lo):
            rows.append((-a, -lo))
    best = np.inf
    for k in range(0, min(n, len(rows)) + 1):
        for act in itertools.combinations(range(len(rows)), k):
            E = np.array([e[0] for e in eqs] + [rows[i][0] for i in act]).reshape(-1, n)
            b = np.array([e[1] for e in eqs] + [rows[i][1] for i in act])
            # least squares tolerates redundant (consistent) equality rows
            m = E.shape[0]
            K = np.block([[qp.P, E.T], [E, np.zeros((m, m))]])
            sol = np.linalg.lstsq(K, np.concatenate([-qp.q, b]), rcond=None)[0]
            x = sol[:n]
            if m and np.abs(E @ x - b).max() > 1e-9:
                continue
            Ax = qp.A @ x
            if np.all(Ax >= qp.l - 1e-9) and np.all(Ax <= qp.u + 1e-9):
                best = min(best, qp.objective(x))
    return best


def test_scalar_lower_bound():
    res = qp_solve(QPForm([[2.0]], [0.0], [[1.0]], [1.0], [np.inf]))
    assert res.status == OPTIMAL
    assert res.x[0] == pytest.approx(1.0, abs=1e-7)


def test_inconsistent_bounds_are_infeasible():
    assert qp_solve(QPForm([[2.0]], [0.0], [[1.0]], [1.0], [0.0])).status == INFEASIBLE
    split = QPForm([[2.0]], [0.0], [[1.0], [1.0]], [1.0, -np.inf], [np.inf, 0.0])
    assert qp_solve(split).status == INFEASIBLE


def test_random_feasible_qps_meet_kkt_and_enumeration():
    rng = np.random.default_rng(0)
    small = 0
    for i in range(50):
        if i < 25:
            n = int(rng.integers(1, 7))
            qp = random_feasible_qp(rng, n, strictly_convex=True, max_rows=n + 4)
        else:
            n = int(rng.integers(7, 41))
            qp = random_feasible_qp(rng, n, strictly_convex=(i % 3 != 0))
        res = qp_solve(qp)
        assert res.status == OPTIMAL, (i, n)
        assert max(kkt(qp, res.x, res.y)) < 1e-6
        if n <= 6:
            small += 1
            assert res.objective == pytest.approx(enumerate_active_sets(qp), abs=1e-6)
    assert small == 25


def test_enumeration_oracle_on_box_only_problems():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(1, 7))
        M = rng.normal(size=(n, n))
        P = M @ M.T + 0.05 * np.eye(n)
        q = rng.normal(size=n) * 3
        qp = QPForm(P, q, np.eye(n), -np.ones(n), np.ones(n))
        res = qp_solve(qp)
        assert res.status == OPTIMAL
        assert res.objective == pytest.approx(enumerate_active_sets(qp), abs=1e-6)


def test_equality_only_problem():
    P = np.diag([2.0, 2.0])
    qp = QPForm(P, [0.0, 0.0], [[1.0, 1.0]], [1.0], [1.0])
    res = qp_solve(qp)
    assert res.status == OPTIMAL
    assert np.allclose(res.x, [0.5, 0.5], atol=1e-9)
