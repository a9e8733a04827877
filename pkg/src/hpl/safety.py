"""Centerline-tracking safety controller and its sampled safe set.

The safe set is a Frenet box ``|h| <= h_max``, ``|v| <= v_max_safe`` with a
heading cone around the local tangent.  The controller tracks the
centerline at a slow reference speed with saturated linear-quadratic
feedback in the frame of the projected segment, and brakes to a stop before
the end of the tube.
"""
import functools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import kernels
from .dynamics import DEFAULT_DT, POS, VEL, SystemLimits
from .qp import solve_equality_qp


class SafeSetError(RuntimeError):
    """No safe-set parameters passed verification within the budget."""


@dataclass(frozen=True)
class SafeSetSpec:
    h_max: float = 0.4
    v_max_safe: float = 0.8
    heading_cos_min: float = 0.0
    v_eps: float = 0.05
    stop_decel: float = 0.5       # deceleration assumed for the end-of-tube margins

    def __post_init__(self):
        if not self.h_max >= 0 or not self.v_max_safe >= 0:
            raise ValueError("h_max and v_max_safe must be non-negative")
        if not -1.0 <= self.heading_cos_min <= 1.0:
            raise ValueError("heading_cos_min must lie in [-1, 1]")

    def validate(self, env, limits=None):
        if self.h_max > 0.5 * env.width:
            raise ValueError(f"h_max {self.h_max} exceeds half the tube width")
        lim = limits or SystemLimits()
        if self.v_max_safe > min(lim.v_max.min(), -lim.v_min.max()) * math.sqrt(2):
            raise ValueError("v_max_safe exceeds the system velocity bounds")

    def contains(self, state, env, limits=None):
        return bool(self.contains_many(np.atleast_2d(state), env, limits)[0])

    def contains_many(self, states, env, limits=None):
        """Exact membership for a batch of states."""
        lim = limits or SystemLimits()
        X = np.atleast_2d(np.asarray(states, dtype=float))
        s, h, seg, _d, st = env.project_many(X[:, POS])
        V = X[:, VEL]
        speed = np.hypot(V[:, 0], V[:, 1])
        t = env.tangents[seg]
        vt = (t * V).sum(axis=1)
        ok = st == kernels.PROJ_OK
        ok &= np.abs(h) <= self.h_max
        ok &= np.all(V >= lim.v_min, axis=1) & np.all(V <= lim.v_max, axis=1)
        ok &= speed <= self.v_max_safe
        heading_ok = vt >= self.heading_cos_min * speed
        ok &= (speed <= self.v_eps) | heading_ok
        a = self.stop_decel
        ok &= s - np.maximum(-vt, 0.0) ** 2 / (2 * a) >= 0.0
        ok &= s + np.maximum(vt, 0.0) ** 2 / (2 * a) <= env.total_length
        return ok

    def shrink(self, other):
        """True when this region is inside `other` (parameter-wise)."""
        return (self.h_max <= other.h_max and self.v_max_safe <= other.v_max_safe
                and self.heading_cos_min >= other.heading_cos_min)

    def to_dict(self):
        return {"h_max": self.h_max, "v_max_safe": self.v_max_safe,
                "heading_cos_min": self.heading_cos_min, "v_eps": self.v_eps,
                "stop_decel": self.stop_decel}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"h_max", "v_max_safe", "heading_cos_min", "v_eps", "stop_decel"}
        if extra:
            raise ValueError(f"unknown safe-set fields: {sorted(extra)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class SafetyControllerCfg:
    v_ref: float = 0.5
    horizon: int = 10
    q_lat: tuple = (30.0, 4.0)        # weights on (h, dh/dt)
    r_lat: float = 1.0
    q_lon: float = 4.0                # weight on speed error along the tangent
    r_lon: float = 1.0
    end_margin: float = 0.05          # stop this far before the tube end
    end_gain: float = 0.5             # v_des = end_gain * remaining room near the end
    dt: float = DEFAULT_DT
    limits: SystemLimits = field(default_factory=SystemLimits)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.v_ref >= 0:
            raise ValueError("v_ref must be non-negative")


# ------------------------------------------------------------------ gains

def _lq_gain(A, B, Q, R, horizon):
    """First-step feedback gain of a finite-horizon LQ problem.

    The terminal cost is the infinite-horizon Riccati solution, so the gain
    equals the stationary one; it is obtained by solving the horizon's
    equality-constrained QP for each unit initial condition.
    """
    n, m = B.shape
    Pf = scipy.linalg.solve_discrete_are(A, B, Q, R)
    N = horizon
    nv = (N + 1) * n + N * m
    H = np.zeros((nv, nv))
    for k in range(N):
        H[k * n:(k + 1) * n, k * n:(k + 1) * n] = Q
    H[N * n:(N + 1) * n, N * n:(N + 1) * n] = Pf
    off = (N + 1) * n
    for k in range(N):
        H[off + k * m:off + (k + 1) * m, off + k * m:off + (k + 1) * m] = R
    H *= 2.0
    E = np.zeros(((N + 1) * n, nv))
    E[:n, :n] = np.eye(n)
    for k in range(N):
        r = (k + 1) * n
        E[r:r + n, k * n:(k + 1) * n] = -A
        E[r:r + n, r:r + n] = np.eye(n)
        E[r:r + n, off + k * m:off + (k + 1) * m] = -B
    K = np.zeros((m, n))
    for i in range(n):
        b = np.zeros((N + 1) * n)
        b[i] = 1.0
        x, _ = solve_equality_qp(H, np.zeros(nv), E, b)
        K[:, i] = -x[off:off + m]
    return K


@functools.lru_cache(maxsize=32)
def _gains(dt, q_lat, r_lat, q_lon, r_lon, horizon):
    A2 = np.array([[1.0, dt], [0.0, 1.0]])
    B2 = np.array([[0.0], [dt]])
    k_lat = _lq_gain(A2, B2, np.diag(q_lat), np.array([[r_lat]]), horizon)[0]
    A1 = np.array([[1.0]])
    B1 = np.array([[dt]])
    k_lon = float(_lq_gain(A1, B1, np.array([[q_lon]]), np.array([[r_lon]]), horizon)[0, 0])
    return k_lat, k_lon


def controller_gains(cfg):
    """``(k_lat (2,), k_lon)`` such that ``a_n = -k_lat @ [h, dh]``."""
    return _gains(cfg.dt, tuple(cfg.q_lat), cfg.r_lat, cfg.q_lon, cfg.r_lon, cfg.horizon)


# -------------------------------------------------------------- controller

def braking_input(state, cfg=None, limits=None):
    """``-v/dt`` clipped to the input ball; always admissible."""
    cfg = cfg or SafetyControllerCfg()
    lim = limits or cfg.limits
    v = np.asarray(state, dtype=float)[VEL]
    u = -v / cfg.dt
    n = math.hypot(u[0], u[1])
    cap = lim.input_norm_max * (1.0 - 1e-12)
    if n > cap:
        u = u * (cap / n)
    return u


def local_frame(env, P, s, h, seg, dist):
    """Unit tangent/normal at the closest centerline point.

    On segment interiors this is the segment frame; where the closest point
    is a vertex the normal points radially, so that ``n . v = dh/dt``.
    """
    t = env.tangents[seg].copy()
    nrm = env.normals[seg].copy()
    c = env.starts[seg] + (s - env.cum_s[seg])[:, None] * env.tangents[seg]
    r = P - c
    at_vertex = (dist > 1e-9) & (np.abs((r * env.tangents[seg]).sum(axis=1)) > 1e-9 * (1 + dist))
    if at_vertex.any():
        sg = np.where(h[at_vertex] >= 0, 1.0, -1.0)
        n_r = sg[:, None] * r[at_vertex] / dist[at_vertex, None]
        nrm[at_vertex] = n_r
        t[at_vertex] = np.stack([n_r[:, 1], -n_r[:, 0]], axis=1)
    return t, nrm


def safety_input_many(states, env, cfg=None):
    """Vectorized safety controller; rows that cannot be projected brake."""
    cfg = cfg or SafetyControllerCfg()
    X = np.atleast_2d(np.asarray(states, dtype=float))
    k_lat, k_lon = controller_gains(cfg)
    s, h, seg, dist, st = env.project_many(X[:, POS])
    t, nrm = local_frame(env, X[:, POS], s, h, seg, dist)
    V = X[:, VEL]
    vt = (t * V).sum(axis=1)
    vn = (nrm * V).sum(axis=1)
    room = np.maximum(env.total_length - cfg.end_margin - s, 0.0)
    v_des = np.minimum(cfg.v_ref, cfg.end_gain * room)
    a_n = -(k_lat[0] * h + k_lat[1] * vn)
    a_t = -k_lon * (vt - v_des)
    cap = cfg.limits.input_norm_max * (1.0 - 1e-12)
    a_n = np.clip(a_n, -cap, cap)
    rest = np.sqrt(np.maximum(cap * cap - a_n * a_n, 0.0))
    a_t = np.clip(a_t, -rest, rest)
    U = a_t[:, None] * t + a_n[:, None] * nrm
    norm = np.hypot(U[:, 0], U[:, 1])
    over = norm > cap
    U[over] *= (cap / norm[over])[:, None]
    bad = st != kernels.PROJ_OK
    if bad.any():
        U[bad] = np.array([braking_input(x, cfg) for x in X[bad]])
    return U


def safety_input(state, env, cfg=None):
    return safety_input_many(np.asarray(state, dtype=float).reshape(1, 4), env, cfg)[0]


# ------------------------------------------------------------ verification

def sample_safe_states(spec, env, n, rng, limits=None, max_rounds=50):
    """`n` states drawn uniformly over the spec's (s, h, speed, heading) box
    and kept only if they pass exact membership."""
    out = []
    got = 0
    s_hi = max(env.s_goal, 1e-9)
    half = math.acos(max(-1.0, min(1.0, spec.heading_cos_min)))
    for _ in range(max_rounds):
        m = 2 * (n - got) + 8
        s = rng.uniform(0.0, s_hi, m)
        h = rng.uniform(-spec.h_max, spec.h_max, m)
        sp = rng.uniform(0.0, spec.v_max_safe, m)
        ang = rng.uniform(-half, half, m)
        seg = np.searchsorted(env.cum_s[1:-1], s, side="right")
        t = env.tangents[seg]
        nrm = env.normals[seg]
        p = env.starts[seg] + (s - env.cum_s[seg])[:, None] * t + h[:, None] * nrm
        dirs = np.cos(ang)[:, None] * t + np.sin(ang)[:, None] * nrm
        v = sp[:, None] * dirs
        X = np.stack([p[:, 0], v[:, 0], p[:, 1], v[:, 1]], axis=1)
        keep = X[spec.contains_many(X, env, limits)]
        out.append(keep[: n - got])
        got += len(out[-1])
        if got >= n:
            break
    return np.vstack(out) if out else np.zeros((0, 4))


def rollout_safety(X0, env, n_steps, cfg=None):
    """Closed-loop rollouts from the rows of `X0`; returns the ``(steps+1, M, 4)``
    state array and the ``(steps, M, 2)`` inputs."""
    cfg = cfg or SafetyControllerCfg()
    A = np.array([[1.0, cfg.dt, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, cfg.dt], [0, 0, 0, 1.0]])
    B = np.array([[0, 0], [cfg.dt, 0], [0, 0], [0, cfg.dt]])
    X = np.empty((n_steps + 1,) + X0.shape)
    U = np.empty((n_steps, X0.shape[0], 2))
    X[0] = X0
    for k in range(n_steps):
        U[k] = safety_input_many(X[k], env, cfg)
        X[k + 1] = X[k] @ A.T + U[k] @ B.T
    return X, U


def verify_safe_set(spec, envs, n_samples=1000, n_steps=500, seed=0, cfg=None):
    """Monte-Carlo invariance check of `spec` under the safety controller.

    A violation is a sampled trajectory that leaves the tube or breaks the
    system limits at any step.  ``box_exits`` counts trajectories that leave
    the Frenet box itself (reported, not a violation: the box is an inner
    approximation of the controller's viable set).
    """
    if n_samples < 1 or n_steps < 1:
        raise ValueError("n_samples and n_steps must be >= 1")
    cfg = cfg or SafetyControllerCfg()
    lim = cfg.limits
    rng = np.random.default_rng(seed)
    report = {"violations": 0, "box_exits": 0, "max_h_seen": 0.0, "max_v_seen": 0.0,
              "max_u_seen": 0.0, "n_trajectories": 0, "n_state_steps": 0}
    for env in envs:
        X0 = sample_safe_states(spec, env, n_samples, rng, lim)
        if len(X0) == 0:
            continue
        X, U = rollout_safety(X0, env, n_steps, cfg)
        flat = X.reshape(-1, 4)
        _s, h, _seg, _d, st = env.project_many(flat[:, POS])
        V = flat[:, VEL]
        ok = (st == kernels.PROJ_OK) & (np.abs(h) <= 0.5 * env.width)
        ok &= np.all(V >= lim.v_min, axis=1) & np.all(V <= lim.v_max, axis=1)
        un = np.hypot(U[..., 0], U[..., 1])
        traj_ok = ok.reshape(n_steps + 1, -1).all(axis=0)
        traj_ok &= (un <= lim.input_norm_max).all(axis=0)
        in_box = spec.contains_many(flat, env, lim).reshape(n_steps + 1, -1).all(axis=0)
        report["violations"] += int((~traj_ok).sum())
        report["box_exits"] += int((~in_box).sum())
        finite_h = np.abs(h[st == kernels.PROJ_OK])
        report["max_h_seen"] = max(report["max_h_seen"], float(finite_h.max(initial=0.0)))
        report["max_v_seen"] = max(report["max_v_seen"], float(np.hypot(V[:, 0], V[:, 1]).max()))
        report["max_u_seen"] = max(report["max_u_seen"], float(un.max()))
        report["n_trajectories"] += len(X0)
        report["n_state_steps"] += len(X0) * n_steps
    return report


def adversarial_tubes(width=1.0, slope_max=1.0, seg_length=0.6, n_segments=6):
    """Zigzag tubes alternating between the extreme slopes."""
    from .environment import TubeEnvironment, TubeSegment
    segs = tuple(TubeSegment(seg_length, slope_max if i % 2 == 0 else -slope_max)
                 for i in range(n_segments))
    segs_r = tuple(TubeSegment(seg_length, -s.slope) for s in segs)
    return [TubeEnvironment(segs, width), TubeEnvironment(segs_r, width)]


def shrink_to_safe(spec0, envs, budget=24, n_samples=200, n_steps=300, seed=0, cfg=None,
                   h_floor=1e-3, tol=1e-3):
    """Largest region found by bisection (h_max, then v_max_safe, then the
    heading bound) whose verification shows no violations."""
    cfg = cfg or SafetyControllerCfg()

    def passes(spec):
        nonlocal budget
        budget -= 1
        return verify_safe_set(spec, envs, n_samples, n_steps, seed, cfg)["violations"] == 0

    if passes(spec0):
        return spec0
    spec = spec0
    floors = {"h_max": h_floor, "v_max_safe": min(cfg.v_ref, spec0.v_max_safe),
              "heading_cos_min": None}
    for name in ("h_max", "v_max_safe", "heading_cos_min"):
        if name == "heading_cos_min":
            lo, hi = 1.0, spec.heading_cos_min        # safe end, unsafe end
        else:
            lo, hi = floors[name], getattr(spec, name)
        cand = replace(spec, **{name: lo})
        if budget <= 0:
            break
        if not passes(cand):
            spec = cand
            continue
        while abs(hi - lo) > tol and budget > 0:
            mid = 0.5 * (lo + hi)
            if passes(replace(spec, **{name: mid})):
                lo = mid
            else:
                hi = mid
        return replace(spec, **{name: lo})
    raise SafeSetError("no safe-set parameters passed verification within the budget")


def report_json(report):
    return json.dumps(report, indent=2)
