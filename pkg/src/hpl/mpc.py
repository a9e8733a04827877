"""Shifting-horizon MPC towards the target-set list.

Each candidate horizon ``N`` (a non-empty slot of the list) gives one QP:
the terminal state must lie in slot ``N``'s target set, earlier non-empty
slots are soft targets (squared point-to-rectangle distance through hinge
slacks), and every predicted state must stay in the tube.  The tube is
convexified per step by the rectangle of the segment the reference state
projects onto, which is an inner approximation of the tube.  Every QP
solution is re-simulated and re-checked with the exact predicates before
it is accepted.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import POS, VEL, LinearModel, SystemLimits, rollout
from .environment import check_env_constraint
from . import kernels
from .qp import OPTIMAL, QPForm, qp_solve

SAFETY_MODE = 0


@dataclass(frozen=True)
class MPCConfig:
    n_facets: int = 16
    tube_margin: float = 1e-5
    target_margin: float = 1e-5
    passes: int = 2
    use_input_rect: bool = False
    qp_tol: float = 1e-6
    qp_max_iter: int = 60

    def __post_init__(self):
        if self.n_facets < 3:
            raise ValueError("input polygon needs at least 3 facets")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


@dataclass
class TubeStep:
    seg: int
    normal: np.ndarray
    tangent: np.ndarray
    origin: np.ndarray            # segment start point
    s0: float                     # arc length at the segment start
    length: float
    half_width: float

    @property
    def halfspaces(self):
        """``(n, lo, hi)``: the pair ``lo <= n.p <= hi`` bounding |h|."""
        c = float(self.normal @ self.origin)
        return self.normal, c - self.half_width, c + self.half_width


@dataclass
class MPCProblem:
    model: LinearModel
    x0: np.ndarray
    N: int
    env: object
    terminal: object                     # TargetSet
    tube: list                           # TubeStep for steps 1..N
    targets: dict = field(default_factory=dict)   # step j (1..N-1) -> HyperRect
    limits: SystemLimits = field(default_factory=SystemLimits)
    urect: object = None
    cfg: MPCConfig = field(default_factory=MPCConfig)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if self.terminal is None or self.terminal.empty:
            raise ValueError("terminal target set must be non-empty")
        if len(self.tube) != self.N:
            raise ValueError("need one tube linearization per predicted step")


@dataclass
class MPCSolution:
    states: np.ndarray
    inputs: np.ndarray
    objective: float
    solver_status: str
    N: int = 0
    iterations: int = 0
    source: str = "qp"
    tube: list = None

    def shifted(self):
        """The plan one step later (drops the first input)."""
        return MPCSolution(self.states[1:], self.inputs[1:], self.objective, self.solver_status,
                           self.N - 1, 0, "shifted", None if self.tube is None else self.tube[1:])


@dataclass
class HorizonResult:
    N: int
    solution: MPCSolution
    targets: object                  # the (possibly demoted) TargetSetList
    attempts: list = field(default_factory=list)

    @property
    def safety_mode(self):
        return self.N == SAFETY_MODE


# --------------------------------------------------------- linearization

def polygon_facets(n, radius=1.0):
    """Outward normals and offsets of a regular n-gon inscribed in a circle."""
    ang = (np.arange(n) + 0.5) * 2 * math.pi / n
    normals = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return normals, np.full(n, radius * math.cos(math.pi / n))


def tube_step(env, seg, margin=0.0):
    return TubeStep(int(seg), env.normals[seg].copy(), env.tangents[seg].copy(),
                    env.starts[seg].copy(), float(env.cum_s[seg]), float(env.lengths[seg]),
                    0.5 * env.width - margin)


def linearize_tube(env, reference, margin=0.0, clamp=False):
    """One :class:`TubeStep` per reference state, or None when a reference
    state cannot be projected.  With `clamp`, states before the start or past
    the end use the first or last segment instead."""
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    _s, _h, seg, _d, st = env.project_many(ref[:, POS])
    if not clamp and np.any(st != kernels.PROJ_OK):
        return None
    return [tube_step(env, i, margin) for i in seg]


def reference_from(x0, model, N, prev=None):
    """States for steps 1..N: a previous plan (already shifted so that its
    first state is `x0`), continued at constant velocity when too short."""
    ref = []
    if prev is not None:
        ref = list(prev.states[1:N + 1])
    last = ref[-1] if ref else np.asarray(x0, dtype=float)
    while len(ref) < N:
        last = model.A @ last
        ref.append(last)
    return np.array(ref)


# ----------------------------------------------------------- transcription

class _Layout:
    def __init__(self, N, targets):
        self.N = N
        self.nx = 4 * (N + 1)
        self.nu = 2 * N
        self.target_steps = sorted(targets)
        self.ne = 2 * len(self.target_steps)
        self.n = self.nx + self.nu + self.ne

    def x(self, j):
        return 4 * j

    def u(self, j):
        return self.nx + 2 * j

    def e(self, k):
        return self.nx + self.nu + 2 * k


class _Rows:
    """Constraint rows collected as (row, col, value) triplets."""

    def __init__(self, n):
        self.n = n
        self.m = 0
        self.ri, self.ci, self.vals = [], [], []
        self.l, self.u = [], []

    def add(self, coeffs, lo, hi):
        r = self.m
        for idx, c in coeffs:
            self.ri.append(r)
            self.ci.append(idx)
            self.vals.append(c)
        self.l.append(lo)
        self.u.append(hi)
        self.m += 1

    def add_block(self, cols, coef, lo, hi):
        """Rows ``coef @ v[cols]`` with bounds `lo`, `hi` (broadcast)."""
        coef = np.atleast_2d(coef)
        k = coef.shape[0]
        r = np.repeat(np.arange(self.m, self.m + k), len(cols))
        self.ri.extend(r.tolist())
        self.ci.extend(list(cols) * k)
        self.vals.extend(coef.ravel().tolist())
        self.l.extend(np.broadcast_to(np.asarray(lo, dtype=float), (k,)).tolist())
        self.u.extend(np.broadcast_to(np.asarray(hi, dtype=float), (k,)).tolist())
        self.m += k

    def matrices(self):
        A = np.zeros((self.m, self.n))
        np.add.at(A, (np.array(self.ri, dtype=np.int64), np.array(self.ci, dtype=np.int64)),
                  np.array(self.vals, dtype=float))
        return A, np.array(self.l, dtype=float), np.array(self.u, dtype=float)

    def add_pos(self, lay, j, vec, extra=(), lo=-np.inf, hi=np.inf):
        """Row on ``vec . p_j`` (p = position of state j) plus extra terms."""
        b = lay.x(j)
        self.add([(b, vec[0]), (b + 2, vec[1])] + list(extra), lo, hi)

    def add_vel(self, lay, j, vec, lo=-np.inf, hi=np.inf):
        b = lay.x(j)
        self.add([(b + 1, vec[0]), (b + 3, vec[1])], lo, hi)


def transcribe(p, cuts=None):
    """QP over stacked ``[states, inputs, slacks]``; returns ``(QPForm, layout)``.

    Without `cuts` the input ball is replaced by the inscribed polygon.  With
    `cuts` (one list of unit directions per stage) it is replaced by the
    circumscribed polygon plus a tangent cut for every listed direction.
    """
    cfg = p.cfg
    lay = _Layout(p.N, p.targets)
    rows = _Rows(lay.n)
    A, B = p.model.A, p.model.B
    # dynamics
    for i in range(4):
        rows.add([(lay.x(0) + i, 1.0)], p.x0[i], p.x0[i])
    for j in range(p.N):
        for i in range(4):
            coeffs = [(lay.x(j + 1) + i, 1.0)]
            coeffs += [(lay.x(j) + c, -A[i, c]) for c in range(4) if A[i, c] != 0]
            coeffs += [(lay.u(j) + c, -B[i, c]) for c in range(2) if B[i, c] != 0]
            rows.add(coeffs, 0.0, 0.0)
    # inputs: inscribed polygon, optional strategy input box
    r = p.limits.input_norm_max
    fn, fo = polygon_facets(cfg.n_facets, r)
    for j in range(p.N):
        if cuts is None:
            rows.add_block([lay.u(j), lay.u(j) + 1], fn, -np.inf, fo * (1 - 1e-9))
        else:
            cn = np.vstack([fn] + [np.atleast_2d(c) for c in cuts[j]])
            rows.add_block([lay.u(j), lay.u(j) + 1], cn, -np.inf, np.full(len(cn), r))
        if cfg.use_input_rect and p.urect is not None and not p.urect.empty:
            for c in range(2):
                rows.add([(lay.u(j) + c, 1.0)], p.urect.lo[c], p.urect.hi[c])
    # states: velocity box and tube rectangle
    for j in range(1, p.N + 1):
        for c, vi in enumerate((1, 3)):
            rows.add([(lay.x(j) + vi, 1.0)], p.limits.v_min[c], p.limits.v_max[c])
        ts = p.tube[j - 1]
        n, lo, hi = ts.halfspaces
        rows.add_pos(lay, j, n, lo=lo, hi=hi)
        ta = float(ts.tangent @ ts.origin)
        rows.add_pos(lay, j, ts.tangent, lo=ta, hi=ta + ts.length)
    # soft targets: e >= l - q, e >= q - u, e >= 0 for q in (s, h)
    for k, j in enumerate(lay.target_steps):
        rect = p.targets[j]
        ts = p.tube[j - 1]
        for d, (vec, off) in enumerate(_frenet_rows(ts)):
            e = (lay.e(k) + d, 1.0)
            rows.add_pos(lay, j, vec, [e], lo=rect.lo[d] - off)
            rows.add_pos(lay, j, -vec, [e], lo=-rect.hi[d] + off)
            rows.add([e], 0.0, np.inf)
    _terminal_rows(rows, lay, p)
    P = np.zeros((lay.n, lay.n))
    idx = np.arange(lay.nx + lay.nu, lay.n)
    P[idx, idx] = 2.0
    q = np.zeros(lay.n)
    A_, l_, u_ = rows.matrices()
    return QPForm(P, q, A_, l_, u_), lay


def _frenet_rows(ts):
    """Linear maps ``q = vec . p + off`` for the linearized (s, h)."""
    s_vec = ts.tangent
    s_off = ts.s0 - float(ts.tangent @ ts.origin)
    h_vec = ts.normal
    h_off = -float(ts.normal @ ts.origin)
    return [(s_vec, s_off), (h_vec, h_off)]


def _terminal_rows(rows, lay, p):
    cfg = p.cfg
    safe = p.terminal.safe
    env = p.env
    m = cfg.target_margin
    j = p.N
    ts = p.tube[j - 1]
    rect = p.terminal.rect
    s_cap = env.total_length - safe.v_max_safe ** 2 / (2 * safe.stop_decel)
    lo = np.array([max(rect.lo[0], 0.0), max(rect.lo[1], -safe.h_max)])
    hi = np.array([min(rect.hi[0], s_cap), min(rect.hi[1], safe.h_max)])
    # confident predictions give rectangles narrower than 2 m; shrink those less
    shrink = np.minimum(m, 0.25 * np.maximum(hi - lo, 0.0))
    lo, hi = lo + shrink, hi - shrink
    for d, (vec, off) in enumerate(_frenet_rows(ts)):
        rows.add_pos(lay, j, vec, lo=lo[d] - off, hi=hi[d] - off)
    # speed polygon inside the safe speed disk
    fn, fo = polygon_facets(cfg.n_facets, safe.v_max_safe)
    b0 = lay.x(j)
    rows.add_block([b0 + 1, b0 + 3], fn, -np.inf, fo * (1 - 1e-6))
    # heading cone around the segment tangent
    c = safe.heading_cos_min
    t, n = ts.tangent, ts.normal
    if c > 0:
        # cone edges at +-acos(c'); keep v on the tangent side of both edges
        c = min(1.0, c + 1e-4)
        sa = math.sqrt(max(1.0 - c * c, 0.0))
        rows.add_vel(lay, j, sa * t - c * n, lo=0.0)
        rows.add_vel(lay, j, sa * t + c * n, lo=0.0)
    elif c > -1.0:
        rows.add_vel(lay, j, t, lo=0.0)


# ------------------------------------------------------------ exact checks

def check_plan(states, inputs, env, limits, terminal=None):
    """Exact feasibility of a simulated plan; returns ``(ok, reason)``."""
    for k, u in enumerate(inputs):
        if not limits.input_ok(u):
            return False, f"input {k} outside the norm ball"
    for k, x in enumerate(states[1:], start=1):
        if not limits.state_ok(x):
            return False, f"state {k} breaks the velocity limits"
        if not check_env_constraint(env, x):
            return False, f"state {k} leaves the tube"
    if terminal is not None and not terminal.contains(states[-1]):
        return False, "terminal state outside the target set"
    return True, ""


def solve_problem(p):
    """Solve one MPC problem; ``optimal`` only if the exact re-check passes."""
    qp, lay = transcribe(p)
    res = qp_solve(qp, tol=p.cfg.qp_tol, max_iter=p.cfg.qp_max_iter)
    iters = res.iterations
    if res.status != OPTIMAL:
        # the inscribed polygon is conservative; retry on the exact ball
        res, iters = _solve_on_ball(p, iters)
    if res.status != OPTIMAL:
        status = "infeasible" if res.status == "infeasible" else "max_iter"
        return MPCSolution(np.zeros((0, 4)), np.zeros((0, 2)), math.inf, status, p.N,
                           iters, "qp", p.tube)
    U = res.x[lay.nx:lay.nx + lay.nu].reshape(p.N, 2).copy()
    r = p.limits.input_norm_max
    U /= np.maximum(1.0, np.linalg.norm(U, axis=1) / r)[:, None]
    X = rollout(p.model, p.x0, U)
    ok, _why = check_plan(X, U, p.env, p.limits, p.terminal)
    obj = float(res.x[lay.nx + lay.nu:] @ res.x[lay.nx + lay.nu:])
    return MPCSolution(X, U, obj, "optimal" if ok else "infeasible", p.N, iters, "qp", p.tube)


def _solve_on_ball(p, iters, rounds=12, rel_tol=1e-7):
    """Cutting planes on the input ball, starting from the circumscribed
    polygon.  Stops as soon as the outer problem is infeasible, so a truly
    infeasible slot costs one extra solve."""
    r = p.limits.input_norm_max
    cuts = [[] for _ in range(p.N)]
    for _ in range(rounds):
        qp, lay = transcribe(p, cuts)
        res = qp_solve(qp, tol=p.cfg.qp_tol, max_iter=p.cfg.qp_max_iter)
        iters += res.iterations
        if res.status != OPTIMAL:
            return res, iters
        U = res.x[lay.nx:lay.nx + lay.nu].reshape(p.N, 2)
        norms = np.linalg.norm(U, axis=1)
        over = np.flatnonzero(norms > r * (1 + rel_tol))
        if over.size == 0:
            return res, iters
        for j in over:
            cuts[j].append(U[j] / norms[j])
    # not converged: the radial scaling in the caller plus the exact
    # re-check decide whether the plan is usable
    return res, iters


def solve_for_slot(lst, slot, x0, env, model, limits, cfg, prev=None):
    """Two-pass solve with slot `slot` as terminal set."""
    terminal = lst[slot]
    targets = {j: lst[j].rect for j in lst.nonempty() if j < slot}
    ref = reference_from(x0, model, slot, prev)
    best = None
    for _ in range(cfg.passes):
        # clamped: references from rest can start marginally behind s = 0
        tube = linearize_tube(env, ref, cfg.tube_margin, clamp=True)
        if tube is None:
            break
        p = MPCProblem(model, np.asarray(x0, dtype=float), slot, env, terminal, tube, targets,
                       limits, terminal.urect, cfg)
        sol = solve_problem(p)
        if sol.solver_status == "optimal":
            best = sol
        elif cfg.use_input_rect and terminal.urect is not None:
            p.cfg = _without_input_rect(cfg)
            sol = solve_problem(p)
            if sol.solver_status == "optimal":
                best = sol
        if sol.states.shape[0] == 0:
            break
        new_ref = sol.states[1:]
        if best is not None and sol is best and _same_segments(env, new_ref, tube):
            break
        ref = new_ref
    if best is None:
        return MPCSolution(np.zeros((0, 4)), np.zeros((0, 2)), math.inf, "infeasible", slot)
    return best


def _without_input_rect(cfg):
    from dataclasses import replace
    return replace(cfg, use_input_rect=False)


def _same_segments(env, states, tube):
    _s, _h, seg, _d, st = env.project_many(np.atleast_2d(states)[:, POS])
    return bool(np.all(st == kernels.PROJ_OK)) and all(int(a) == t.seg for a, t in zip(seg, tube))


def select_horizon_and_solve(lst, x0, env, model, limits, cfg=None, prev=None):
    """Largest non-empty slot whose problem is feasible.

    `prev` is the previous step's plan already shifted by one step (its first
    state equals `x0`).  When the QP for the slot holding that plan's
    terminal set fails, the shifted plan itself is used; it is feasible by
    construction.  Slots that fail are marked empty.  ``N = 0`` signals
    safety mode.
    """
    cfg = cfg or MPCConfig()
    attempts = []
    prev_slot = prev.N if prev is not None and prev.N >= 1 else None
    for slot in sorted(lst.nonempty(), reverse=True):
        sol = solve_for_slot(lst, slot, x0, env, model, limits, cfg, prev)
        attempts.append((slot, sol.solver_status, sol.iterations))
        if sol.solver_status == "optimal":
            return HorizonResult(slot, sol, lst, attempts)
        if slot == prev_slot:
            ok, _ = check_plan(prev.states, prev.inputs, env, limits, lst[slot])
            if ok and np.array_equal(prev.states[0], x0):
                attempts.append((slot, "shifted", 0))
                return HorizonResult(slot, prev, lst, attempts)
        lst = lst.mark_empty(slot)
    return HorizonResult(SAFETY_MODE, None, lst, attempts)
