"""Dense convex QP solver.

Problems are posed as ::

    minimize    1/2 x'Px + q'x
    subject to  l <= A x <= u

Rows with ``l == u`` are equalities and are eliminated through a null-space
basis; the remaining two-sided rows go to a primal-dual interior point method
(:func:`hpl.kernels.ipm_solve`).
"""
import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import kernels

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class QPForm:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.l = np.asarray(self.l, dtype=float).reshape(-1)
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}")
        if not (self.A.shape[0] == self.l.size == self.u.size):
            raise ValueError("A, l, u row counts differ")

    @property
    def n(self):
        return self.q.size

    def objective(self, x):
        return 0.5 * x @ self.P @ x + self.q @ x


@dataclass
class QPResult:
    status: str
    x: np.ndarray
    y: np.ndarray          # one multiplier per row of A (positive: upper bound active)
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float


def kkt_residuals(qp, x, y):
    """(primal, dual, complementarity) infinity-norm residuals."""
    Ax = qp.A @ x
    primal = 0.0
    if Ax.size:
        primal = float(max(0.0, np.max(qp.l - Ax), np.max(Ax - qp.u)))
    dual = float(np.abs(qp.P @ x + qp.q + qp.A.T @ y).max()) if qp.n else 0.0
    comp = 0.0
    if Ax.size:
        with np.errstate(invalid="ignore"):
            up = np.where(y > 0, y * (qp.u - Ax), 0.0)
            lo = np.where(y < 0, -y * (Ax - qp.l), 0.0)
        vals = np.abs(np.concatenate([up[np.isfinite(up)], lo[np.isfinite(lo)]]))
        # a multiplier on an infinite bound is itself a violation
        bad = ((y > 0) & ~np.isfinite(qp.u)) | ((y < 0) & ~np.isfinite(qp.l))
        comp = float(max(vals.max() if vals.size else 0.0, np.abs(y[bad]).max() if bad.any() else 0.0))
    return primal, dual, comp


def _infeasible(qp, iters=0):
    n = qp.n
    return QPResult(INFEASIBLE, np.full(n, np.nan), np.zeros(qp.A.shape[0]), np.inf, iters,
                    np.inf, np.inf, np.inf)


def qp_solve(qp, tol=1e-6, max_iter=60, ipm_tol=1e-10):
    """Solve `qp`; the result is ``optimal`` only when all KKT residuals < `tol`."""
    A, l, u = qp.A, qp.l, qp.u
    n = qp.n
    if np.any(l > u):
        return _infeasible(qp)
    scale_eq = np.maximum(np.abs(A).max(axis=1), 1e-300) if A.size else np.ones(0)
    eq = np.isfinite(l) & np.isfinite(u) & (np.abs(u - l) <= 1e-13 * np.maximum(1.0, np.abs(l)))
    E = A[eq] / scale_eq[eq, None]
    b = l[eq] / scale_eq[eq]

    # null-space elimination of equalities: x = x_p + Z w
    if E.shape[0]:
        fac = _eq_factor(E)
        Ur, Sr, Vr, Z = fac
        x_p = Vr @ ((Ur.T @ b) / Sr)
        if np.abs(E @ x_p - b).max() > 1e-9 * (1.0 + np.abs(b).max()):
            return _infeasible(qp)
    else:
        fac = None
        x_p = np.zeros(n)
        Z = np.eye(n)

    # inequality rows: Gx <= h with one row per finite bound
    ineq = ~eq
    rows = np.flatnonzero(ineq)
    up_rows = rows[np.isfinite(u[rows])]
    lo_rows = rows[np.isfinite(l[rows])]
    G_full = np.vstack([A[up_rows], -A[lo_rows]]) if rows.size else np.zeros((0, n))
    h_full = np.concatenate([u[up_rows], -l[lo_rows]]) if rows.size else np.zeros(0)
    gs = np.abs(G_full).max(axis=1) if G_full.shape[0] else np.zeros(0)
    zero_rows = gs <= 1e-300
    if np.any(h_full[zero_rows] < 0):
        return _infeasible(qp)
    keep = ~zero_rows
    G_full, h_full, gs = G_full[keep], h_full[keep], gs[keep]
    src_rows = np.concatenate([up_rows, lo_rows])[keep]
    sign = np.concatenate([np.ones(up_rows.size), -np.ones(lo_rows.size)])[keep]
    G = G_full / gs[:, None]
    h = h_full / gs

    Pr = Z.T @ qp.P @ Z
    Pr = 0.5 * (Pr + Pr.T)
    qr = Z.T @ (qp.P @ x_p + qp.q)
    Gr = np.ascontiguousarray(G @ Z)
    hr = h - G @ x_p
    reg = 1e-12 * max(1.0, np.abs(Pr).max() if Pr.size else 1.0)

    if Z.shape[1] == 0:
        w = np.zeros(0)
        zr = np.zeros(G.shape[0])
        st = kernels.IPM_SOLVED if np.all(hr >= -1e-9) else kernels.IPM_PRIMAL_INFEASIBLE
        iters = 0
    else:
        w, zr, _s, st, iters = kernels.ipm_solve(np.ascontiguousarray(Pr), qr, Gr, hr,
                                                 ipm_tol, max_iter, reg)
    if st == kernels.IPM_PRIMAL_INFEASIBLE:
        return _infeasible(qp, iters)

    x, y = _recover(qp, x_p, Z, w, zr, eq, fac, scale_eq, src_rows, sign, gs)
    primal, dual, comp = kkt_residuals(qp, x, y)
    if max(primal, dual, comp) >= 0.1 * tol and Gr.shape[0] and Z.shape[1]:
        polished = _polish(Pr, qr, Gr, hr, zr, _s)
        if polished is not None:
            x2, y2 = _recover(qp, x_p, Z, polished[0], polished[1], eq, fac, scale_eq,
                              src_rows, sign, gs)
            res2 = kkt_residuals(qp, x2, y2)
            if max(res2) < max(primal, dual, comp):
                x, y = x2, y2
                primal, dual, comp = res2
    ok = st in (kernels.IPM_SOLVED, kernels.IPM_MAX_ITER) and max(primal, dual, comp) < tol
    status = OPTIMAL if ok else MAX_ITER
    return QPResult(status, x, y, float(qp.objective(x)), int(iters), primal, dual, comp)


_FACTOR_CACHE = OrderedDict()
_FACTOR_CACHE_SIZE = 64


def _eq_factor(E):
    """Thin SVD pieces ``(U_r, S_r, V_r, Z)`` of the scaled equality matrix.

    Receding-horizon problems repeat the same dynamics rows at every step,
    so factorizations are cached by content.
    """
    key = (E.shape, hashlib.blake2b(np.ascontiguousarray(E).tobytes(), digest_size=16).digest())
    hit = _FACTOR_CACHE.get(key)
    if hit is not None:
        _FACTOR_CACHE.move_to_end(key)
        return hit
    U_, S, Vt = np.linalg.svd(E, full_matrices=True)
    rank = int(np.sum(S > 1e-10 * max(S[0], 1.0)))
    fac = (U_[:, :rank], S[:rank], Vt[:rank].T.copy(), Vt[rank:].T.copy())
    _FACTOR_CACHE[key] = fac
    if len(_FACTOR_CACHE) > _FACTOR_CACHE_SIZE:
        _FACTOR_CACHE.popitem(last=False)
    return fac


def _recover(qp, x_p, Z, w, zr, eq, fac, scale_eq, src_rows, sign, gs):
    """Map a reduced-space primal/dual pair back to the original rows."""
    x = x_p + Z @ w
    y = np.zeros(qp.A.shape[0])
    np.add.at(y, src_rows, sign * zr / gs)
    if fac is not None:
        # least-squares multipliers of the equality rows: E^T y_eq = -rest
        Ur, Sr, Vr, _Z = fac
        rest = qp.P @ x + qp.q + qp.A[~eq].T @ y[~eq]
        y_eq = -Ur @ ((Vr.T @ rest) / Sr)
        y[eq] = y_eq / scale_eq[eq]
    return x, y


def _polish(P, q, G, h, z, s):
    """Re-solve with the guessed active set held as equalities.

    Returns None when the guess is inconsistent (negative multipliers or a
    violated inactive row).
    """
    active = z > s
    n = P.shape[0]
    Ga = G[active]
    k = Ga.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P + 1e-13 * np.eye(n)
    K[:n, n:] = Ga.T
    K[n:, :n] = Ga
    rhs = np.concatenate([-q, h[active]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    w, za = sol[:n], sol[n:]
    if np.any(za < -1e-9) or np.any(G @ w - h > 1e-9):
        return None
    zfull = np.zeros_like(z)
    zfull[active] = np.maximum(za, 0.0)
    return w, zfull


def solve_equality_qp(P, q, E, b):
    """Minimizer of an equality-constrained QP through its KKT system."""
    n = P.shape[0]
    m = E.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = E.T
    K[n:, :n] = E
    rhs = np.concatenate([-q, b])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]
