"""Hot numeric kernels with an optional numba path.

Every kernel exists twice: a vectorized numpy version and a loop/numba
version.  The public names (``ard_gram``, ``project_points``, ``ipm_solve``)
bind to the numba build when numba imports and ``HPL_DISABLE_NUMBA`` is not
set, otherwise to the numpy version.  Both are importable explicitly for
benchmarking (``*_numpy`` / ``*_loops``).
"""
import os

import numpy as np
import scipy.linalg

_FLAG = os.environ.get("HPL_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in {"1", "true", "yes", "on"}

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by HPL_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    njit = None
    HAVE_NUMBA = False

# projection status codes
PROJ_OK = 0
PROJ_BEFORE_START = 1
PROJ_BEYOND_END = 2

# ipm status codes
IPM_SOLVED = 0
IPM_PRIMAL_INFEASIBLE = 1
IPM_DUAL_INFEASIBLE = 2
IPM_MAX_ITER = 3


# ---------------------------------------------------------------- ARD kernel

def ard_gram_numpy(Z1, Z2, sf2, lengthscales):
    A = Z1 / lengthscales
    B = Z2 / lengthscales
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(d2, 0.0, out=d2)
    return sf2 * np.exp(-0.5 * d2)


def ard_gram_loops(Z1, Z2, sf2, lengthscales):
    n1 = Z1.shape[0]
    n2 = Z2.shape[0]
    m = Z1.shape[1]
    inv = 1.0 / (lengthscales * lengthscales)
    K = np.empty((n1, n2))
    for i in range(n1):
        for j in range(n2):
            acc = 0.0
            for d in range(m):
                diff = Z1[i, d] - Z2[j, d]
                acc += diff * diff * inv[d]
            K[i, j] = sf2 * np.exp(-0.5 * acc)
    return K


# ---------------------------------------------------------- polyline project

def project_points_numpy(P, starts, tangents, lengths, cum_s, tol):
    """Closest-point projection of many 2-D points onto a polyline.

    Returns (s, h, seg, dist, status) arrays.  Ties between segments go to the
    later segment.  h is the signed distance, positive left of travel.
    """
    n_seg = starts.shape[0]
    d = P[:, None, :] - starts[None, :, :]                      # (M, n, 2)
    tau = (d * tangents[None]).sum(-1)                           # (M, n)
    tau_c = np.clip(tau, 0.0, lengths[None, :])
    cx = starts[None, :, 0] + tau_c * tangents[None, :, 0]
    cy = starts[None, :, 1] + tau_c * tangents[None, :, 1]
    dist = np.hypot(P[:, 0:1] - cx, P[:, 1:2] - cy)
    # later segment wins ties within tol
    dmin = dist.min(axis=1)
    close = dist <= (dmin[:, None] + tol)
    seg = n_seg - 1 - np.argmax(close[:, ::-1], axis=1)
    rows = np.arange(P.shape[0])
    t_sel = tau[rows, seg]
    tc_sel = tau_c[rows, seg]
    dist_sel = dist[rows, seg]
    s = cum_s[seg] + tc_sel
    tx = tangents[seg, 0]
    ty = tangents[seg, 1]
    dx = P[:, 0] - (starts[seg, 0] + tc_sel * tx)
    dy = P[:, 1] - (starts[seg, 1] + tc_sel * ty)
    h = tx * dy - ty * dx
    # clamped onto an interior vertex: signed by the bisector tangent
    at_start = (t_sel < tc_sel) & (seg > 0)
    at_end = (t_sel > tc_sel) & (seg < n_seg - 1)
    vertex = at_start | at_end
    if vertex.any():
        # clipped so rows that are not at a vertex still index in range
        prev = np.where(at_start, seg - 1, seg)
        nxt = np.minimum(np.where(at_start, seg, seg + 1), n_seg - 1)
        bx = tangents[prev, 0] + tangents[nxt, 0]
        by = tangents[prev, 1] + tangents[nxt, 1]
        cr = bx * dy - by * dx
        h = np.where(vertex, np.sign(cr) * dist_sel, h)
    status = np.zeros(P.shape[0], dtype=np.int64)
    status[(seg == 0) & (t_sel < -tol)] = PROJ_BEFORE_START
    status[(seg == n_seg - 1) & (t_sel > lengths[n_seg - 1] + tol)] = PROJ_BEYOND_END
    return s, h, seg.astype(np.int64), dist_sel, status


def project_points_loops(P, starts, tangents, lengths, cum_s, tol):
    M = P.shape[0]
    n_seg = starts.shape[0]
    s_out = np.empty(M)
    h_out = np.empty(M)
    seg_out = np.empty(M, dtype=np.int64)
    d_out = np.empty(M)
    st_out = np.zeros(M, dtype=np.int64)
    for k in range(M):
        px = P[k, 0]
        py = P[k, 1]
        best = 1e300
        bi = 0
        bt = 0.0
        btc = 0.0
        for i in range(n_seg):
            dx = px - starts[i, 0]
            dy = py - starts[i, 1]
            t = dx * tangents[i, 0] + dy * tangents[i, 1]
            tc = min(max(t, 0.0), lengths[i])
            ex = px - (starts[i, 0] + tc * tangents[i, 0])
            ey = py - (starts[i, 1] + tc * tangents[i, 1])
            dd = np.sqrt(ex * ex + ey * ey)
            if dd <= best + tol:
                if dd < best:
                    best = dd
                bi = i
                bt = t
                btc = tc
        # recompute the exact distance of the chosen segment
        tx = tangents[bi, 0]
        ty = tangents[bi, 1]
        ex = px - (starts[bi, 0] + btc * tx)
        ey = py - (starts[bi, 1] + btc * ty)
        dist = np.sqrt(ex * ex + ey * ey)
        h = tx * ey - ty * ex
        if bt < btc and bi > 0:
            bx = tangents[bi - 1, 0] + tx
            by = tangents[bi - 1, 1] + ty
            cr = bx * ey - by * ex
            h = np.sign(cr) * dist
        elif bt > btc and bi < n_seg - 1:
            bx = tx + tangents[bi + 1, 0]
            by = ty + tangents[bi + 1, 1]
            cr = bx * ey - by * ex
            h = np.sign(cr) * dist
        s_out[k] = cum_s[bi] + btc
        h_out[k] = h
        seg_out[k] = bi
        d_out[k] = dist
        if bi == 0 and bt < -tol:
            st_out[k] = PROJ_BEFORE_START
        elif bi == n_seg - 1 and bt > lengths[n_seg - 1] + tol:
            st_out[k] = PROJ_BEYOND_END
    return s_out, h_out, seg_out, d_out, st_out


# --------------------------------------------------------------- QP (IPM)

def _chol_solve(L, b):
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= L[i, j] * y[j]
        y[i] = acc / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for j in range(i + 1, n):
            acc -= L[j, i] * x[j]
        x[i] = acc / L[i, i]
    return x


def _chol_solve_numpy(L, b):
    return scipy.linalg.cho_solve((L, True), b)


def ipm_core(P, q, G, h, tol, max_iter, reg):
    """Mehrotra predictor-corrector IPM for  min 1/2 x'Px + q'x  s.t. Gx <= h.

    Written in the numpy subset numba understands, so one source serves both
    backends.  Returns the best iterate seen (by KKT merit) as
    (x, z, s, status, iterations).
    """
    n = P.shape[0]
    m = G.shape[0]
    GT = np.ascontiguousarray(G.T)
    x = np.zeros(n)
    if m == 0:
        M = P + reg * np.eye(n)
        x = np.linalg.solve(M, -q)
        return x, np.zeros(0), np.zeros(0), IPM_SOLVED, 1
    s = h - G @ x
    smin = s.min()
    if smin < 1.0:
        s = s + (1.0 - smin)
    z = np.ones(m)
    best_x = x.copy()
    best_z = z.copy()
    best_s = s.copy()
    best = np.inf
    status = IPM_MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        rd = P @ x + q + GT @ z
        rp = G @ x + s - h
        mu = (s @ z) / m
        merit = max(np.abs(rd).max() if n > 0 else 0.0, np.abs(rp).max(), mu)
        if merit < best:
            best = merit
            best_x[:] = x
            best_z[:] = z
            best_s[:] = s
        if merit <= tol:
            status = IPM_SOLVED
            break
        # primal infeasibility certificate: z >= 0, G'z = 0, h'z < 0
        hz = h @ z
        if hz < 0.0:
            gz = np.abs(GT @ z).max()
            if gz <= 1e-9 * (-hz) and np.abs(rp).max() > tol:
                status = IPM_PRIMAL_INFEASIBLE
                break
        # dual infeasibility: P x ~ 0, G x <= 0, q'x < 0 along a diverging x
        qx = q @ x
        if qx < 0.0 and n > 0:
            if np.abs(x).max() > 1e8 and np.abs(P @ x).max() <= 1e-9 * (-qx) \
                    and (G @ x).max() <= 1e-9 * (-qx):
                status = IPM_DUAL_INFEASIBLE
                break
        w = z / s
        M = P + GT @ (G * w.reshape(-1, 1)) + reg * np.eye(n)
        if not np.all(np.isfinite(M)):
            break
        # affine predictor
        rc = s * z
        rhs = -rd - GT @ ((-rc + z * rp) / s)
        dmax = np.abs(np.diag(M)).max()
        bump = 1e-14 * dmax
        L = np.zeros((n, n))
        factored = False
        for _k in range(6):
            try:
                L = np.linalg.cholesky(M)
                factored = True
            except Exception:
                M = M + bump * np.eye(n)
                bump = bump * 100.0
            if factored:
                break
        if not factored:
            break
        dx = _chol_solve(L, rhs)
        gdx = G @ dx
        ds = -rp - gdx
        dz = (-rc + z * rp) / s + w * gdx
        a_aff = 1.0
        neg = ds < 0.0
        if neg.any():
            a_aff = min(a_aff, (-s[neg] / ds[neg]).min())
        neg = dz < 0.0
        if neg.any():
            a_aff = min(a_aff, (-z[neg] / dz[neg]).min())
        mu_aff = ((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3
        # corrector
        rc = s * z + ds * dz - sigma * mu
        rhs = -rd - GT @ ((-rc + z * rp) / s)
        dx = _chol_solve(L, rhs)
        gdx = G @ dx
        ds = -rp - gdx
        dz = (-rc + z * rp) / s + w * gdx
        a = 1.0
        neg = ds < 0.0
        if neg.any():
            a = min(a, (-s[neg] / ds[neg]).min())
        neg = dz < 0.0
        if neg.any():
            a = min(a, (-z[neg] / dz[neg]).min())
        a = min(1.0, 0.99 * a)
        if a < 1e-10 or not np.all(np.isfinite(dx)):
            break
        x = x + a * dx
        s = np.maximum(s + a * ds, 1e-200)
        z = np.maximum(z + a * dz, 1e-200)
    if status == IPM_PRIMAL_INFEASIBLE or status == IPM_DUAL_INFEASIBLE:
        return x, z, s, status, it
    return best_x, best_z, best_s, status, it


# ------------------------------------------------------------------ binding

def _bind_ipm(chol_solve):
    # ipm_core resolves _chol_solve from module globals at call/compile time
    g = dict(globals())
    g["_chol_solve"] = chol_solve
    return type(ipm_core)(ipm_core.__code__, g, "ipm_core")


ipm_core_numpy = _bind_ipm(_chol_solve_numpy)

if HAVE_NUMBA:
    ipm_core_jit = njit(cache=True)(_bind_ipm(njit(cache=True)(_chol_solve)))
    ard_gram = njit(cache=True)(ard_gram_loops)
    project_points = njit(cache=True)(project_points_loops)
    ipm_solve = ipm_core_jit
else:
    ard_gram = ard_gram_numpy
    project_points = project_points_numpy
    ipm_solve = ipm_core_numpy
