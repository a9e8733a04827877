"""Closed-loop execution, demonstrations, training and evaluation."""
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp as gpmod
from .dynamics import (DEFAULT_DT, POS, VEL, LinearModel, SystemLimits, make_state, rollout,
                       step)
from .environment import OutOfDomainError, check_env_constraint, generate_tube, tube_margin
from .mpc import (MPCConfig, check_plan, linearize_tube, polygon_facets,
                  select_horizon_and_solve, tube_step)
from .qp import OPTIMAL, QPForm, qp_solve
from .safety import SafeSetSpec, SafetyControllerCfg, local_frame, safety_input, sample_safe_states
from .strategy import (EMPTY, StrategyConfig, TargetSetList, advance, build_strategy_sets,
                       gate, lift)
from . import kernels

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class HardFailure(RuntimeError):
    """A closed-loop step violated a constraint."""


# ------------------------------------------------------------- executions

@dataclass
class Execution:
    states: np.ndarray
    inputs: np.ndarray
    env: object = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 4)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, 2)
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("need exactly one more state than inputs")

    @property
    def duration(self):
        return len(self.inputs)

    def to_records(self):
        out = []
        for k, x in enumerate(self.states):
            rec = {"k": k, "state": x.tolist()}
            if k < len(self.inputs):
                rec["input"] = self.inputs[k].tolist()
            out.append(rec)
        return out

    @classmethod
    def from_records(cls, records, env=None):
        states = [r["state"] for r in records]
        inputs = [r["input"] for r in records if "input" in r]
        return cls(np.array(states), np.array(inputs).reshape(-1, 2), env)


def validate_execution(ex, env, model=None, limits=None, require_goal=True, tol=1e-9):
    """``(ok, reason)`` for the execution invariants."""
    model = model or LinearModel.double_integrator()
    limits = limits or SystemLimits()
    X, U = ex.states, ex.inputs
    for k, u in enumerate(U):
        if not limits.input_ok(u):
            return False, f"input {k} outside the norm ball"
        nxt = model.A @ X[k] + model.B @ u
        if np.abs(nxt - X[k + 1]).max() > tol:
            return False, f"transition {k} inconsistent with the dynamics"
    for k, x in enumerate(X):
        if not limits.state_ok(x):
            return False, f"state {k} breaks the velocity limits"
        if not check_env_constraint(env, x):
            return False, f"state {k} outside the tube"
    if require_goal and not env.in_goal(X[-1]):
        return False, "final state not in the task target region"
    return True, ""


# ------------------------------------------------------------------ logs

@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    completed: bool = False
    wall_time: float = 0.0
    reason: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def safety_steps(self):
        return sum(1 for r in self.records if r["mode"] == "safety")

    def to_jsonl(self):
        return "\n".join(json.dumps(r) for r in self.records) + ("\n" if self.records else "")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


# --------------------------------------------------------------- bundles

@dataclass
class ModelBundle:
    models: list
    safe: SafeSetSpec
    T: int = 20
    N: int = 10
    ds: float = 0.1
    eta: float = 2.0
    d_thresh: np.ndarray = None
    version: int = BUNDLE_VERSION

    def strategy_config(self, **over):
        kw = dict(eta=self.eta, d_thresh=self.d_thresh, T=self.T, N=self.N, ds=self.ds)
        kw.update({k: v for k, v in over.items() if v is not None})
        return StrategyConfig(**kw)

    def to_dict(self):
        return {"version": self.version, "T": self.T, "N": self.N, "ds": self.ds,
                "eta": self.eta, "d_thresh": None if self.d_thresh is None
                else [None if np.isinf(v) else float(v) for v in self.d_thresh],
                "safe": self.safe.to_dict(), "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != BUNDLE_VERSION:
            raise ValueError(f"model bundle version {d.get('version')} is not supported "
                             f"(expected {BUNDLE_VERSION})")
        return cls([gpmod.GPModel.from_dict(m) for m in d["models"]],
                   SafeSetSpec.from_dict(d["safe"]), int(d["T"]), int(d["N"]), float(d["ds"]),
                   float(d["eta"]), None if d["d_thresh"] is None
                   else np.array([np.inf if v is None else v for v in d["d_thresh"]], dtype=float))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class TrainConfig:
    """GP training and gating-threshold settings.

    `threshold_rule` picks how per-output uncertainty thresholds are set:
    ``"heldout"`` takes the `threshold_quantile` of posterior std devs on
    demonstrations whose tube was held out of the conditioning set (tubes
    split into `cv_folds` groups, hyperparameters kept fixed);
    ``"residual"`` takes `d_thresh_scale` times the training-residual std.
    With `gate_inputs` false the input outputs never reject: their sets only
    matter when the MPC applies the optional input box.
    """
    T: int = 20
    N: int = 10
    ds: float = 0.1
    eta: float = 2.0
    threshold_rule: str = "heldout"
    threshold_quantile: float = 0.99
    cv_folds: int = 5
    d_thresh_scale: float = 2.0
    gate_inputs: bool = False
    restarts: int = 1
    max_points: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.threshold_rule not in ("heldout", "residual"):
            raise ValueError(f"unknown threshold rule {self.threshold_rule!r}")
        if not 0 < self.threshold_quantile <= 1:
            raise ValueError("threshold_quantile must lie in (0, 1]")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")


def _tube_groups(executions, envs):
    """Per-execution tube index (executions sharing an env object share it)."""
    seen = {}
    return np.array([seen.setdefault(id(env), len(seen)) for env in envs[:len(executions)]])


def heldout_sigmas(models, data, groups, folds, max_points, seed=0):
    """Posterior std of every row when its tube is left out of the active set.

    `groups` maps each row's execution to a tube index; tubes are split
    round-robin into `folds` groups.  Hyperparameters and transforms are
    kept fixed; only the conditioning data changes.
    """
    tube = groups[np.asarray(data.task)]
    fold = tube % folds
    out = np.full((len(data), len(models)), np.nan)
    for f in range(folds):
        test = np.flatnonzero(fold == f)
        train = np.flatnonzero(fold != f)
        if test.size == 0 or train.size < 2:
            continue
        tr = data.subset(train)
        if max_points is not None and len(tr) > max_points:
            rng = np.random.default_rng([seed, f])
            tr = tr.subset(gpmod.farthest_point_subset(tr.Z, max_points, rng))
        for col, m in enumerate(models):
            mm = gpmod.GPModel(m.params, tr.Z, tr.target(col), m.z_mean, m.z_std, m.y_mean,
                               m.y_scale)
            out[test, col] = mm.predict(data.Z[test])[1]
    return out


def train_models(executions, envs, safe, cfg=None):
    """Four GPs (s, h, ax, ay) on the demonstrations, packed into a bundle
    with per-output uncertainty thresholds (see :class:`TrainConfig`)."""
    cfg = cfg or TrainConfig()
    data = gpmod.build_dataset(executions, envs, cfg.N, cfg.T, cfg.ds)
    if len(data) < 2:
        raise ValueError("not enough demonstration data to train")
    models = [gpmod.fit(data, col, restarts=cfg.restarts, seed=cfg.seed + col,
                        max_points=cfg.max_points) for col in range(4)]
    groups = _tube_groups(executions, envs)
    n_tubes = int(groups.max()) + 1 if groups.size else 0
    if cfg.threshold_rule == "heldout" and n_tubes >= 2:
        sig = heldout_sigmas(models, data, groups, min(cfg.cv_folds, n_tubes), cfg.max_points,
                             cfg.seed)
        d_thresh = np.nanquantile(sig, cfg.threshold_quantile, axis=0)
    else:
        if cfg.threshold_rule == "heldout":
            log.warning("held-out thresholds need >= 2 tubes; using the residual rule")
        resid = np.array([m.train_resid_std for m in models])
        d_thresh = cfg.d_thresh_scale * np.maximum(resid, 1e-9)
    if not cfg.gate_inputs:
        d_thresh[2:] = np.inf
    return ModelBundle(models, safe, cfg.T, cfg.N, cfg.ds, cfg.eta, d_thresh)


# ------------------------------------------------------------- run config

@dataclass(frozen=True)
class RunConfig:
    T: int = None
    N: int = None
    eta: float = None
    d_thresh: object = None
    ds: float = None
    max_steps: int = None
    seed: int = 0
    dt: float = DEFAULT_DT
    limits: SystemLimits = field(default_factory=SystemLimits)
    mpc: MPCConfig = field(default_factory=MPCConfig)
    safety: SafetyControllerCfg = field(default_factory=SafetyControllerCfg)
    x0: tuple = (0.0, 0.0, 0.0, 0.0)

    def steps_for(self, env):
        if self.max_steps is not None:
            if self.max_steps <= 0:
                raise ValueError("max_steps must be positive")
            return int(self.max_steps)
        return int(math.ceil(4 * env.total_length / (self.safety.v_ref * self.dt)))


def _check_step(env, x, u, limits, k):
    if not limits.input_ok(u):
        raise HardFailure(f"step {k}: input {u} outside the norm ball")
    if not limits.state_ok(x):
        raise HardFailure(f"step {k}: state {x} breaks the velocity limits")
    if not check_env_constraint(env, x):
        raise HardFailure(f"step {k}: state {x} left the tube")


def run_hpl(env, bundle, cfg=None, record_targets=True):
    """Closed-loop HPL episode; returns ``(Execution, EpisodeLog)``."""
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    scfg = bundle.strategy_config(T=cfg.T, N=cfg.N, eta=cfg.eta, ds=cfg.ds,
                                  d_thresh=cfg.d_thresh)
    safe = bundle.safe
    model = LinearModel.double_integrator(cfg.dt)
    limits = cfg.limits
    x = np.asarray(cfg.x0, dtype=float)
    if not safe.contains(x, env, limits):
        raise ValueError("initial state must lie in the safe set")
    lst = TargetSetList.empty(scfg.T)
    prev = None
    mode = None
    states, inputs = [x], []
    elog = EpisodeLog()
    max_steps = cfg.steps_for(env)
    for k in range(max_steps):
        if env.in_goal(x):
            elog.completed = True
            break
        fc = env.project(x[POS])
        z = gpmod.query_vector(env, x, scfg.N, scfg.ds)
        xrect, urect, c = build_strategy_sets(bundle.models, z, scfg, [fc.s, fc.h, 0.0, 0.0])
        accepted = gate(c, scfg)
        newest = lift(xrect, env, safe, limits, urect) if accepted else EMPTY
        lst = advance(lst, newest)
        shifted = prev.shifted() if prev is not None and prev.N >= 2 else None
        hr = select_horizon_and_solve(lst, x, env, model, limits, cfg.mpc, shifted)
        lst = hr.targets
        if hr.safety_mode:
            if mode != "safety" and not safe.contains(x, env, limits):
                raise HardFailure(f"step {k}: safety mode entered outside the safe set")
            u = safety_input(x, env, replace(cfg.safety, dt=cfg.dt, limits=limits))
            new_mode, prev = "safety", None
        else:
            u = hr.solution.inputs[0]
            new_mode, prev = "mpc", hr.solution
        rec = {"k": k, "state": x.tolist(), "input": np.asarray(u).tolist(), "mode": new_mode,
               "N_k": hr.N, "sigmas": c.sigmas.tolist(), "accepted": accepted,
               "s": fc.s, "h": fc.h,
               "attempts": [[a, b, int(it)] for a, b, it in hr.attempts]}
        if record_targets:
            rec["new_target"] = newest.rect.to_list()
            rec["targets"] = lst.to_list()
        elog.records.append(rec)
        mode = new_mode
        x = step(model, x, u)
        _check_step(env, x, u, limits, k)
        states.append(x)
        inputs.append(np.asarray(u, dtype=float))
    else:
        elog.completed = env.in_goal(x)
        if not elog.completed:
            elog.reason = "timeout"
    elog.wall_time = time.perf_counter() - t0
    return Execution(np.array(states), np.array(inputs).reshape(-1, 2), env), elog


def run_safety(env, cfg=None):
    """The safety controller alone from the initial state until the goal."""
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    model = LinearModel.double_integrator(cfg.dt)
    scfg = replace(cfg.safety, dt=cfg.dt, limits=cfg.limits)
    x = np.asarray(cfg.x0, dtype=float)
    states, inputs = [x], []
    elog = EpisodeLog()
    for k in range(cfg.steps_for(env)):
        if env.in_goal(x):
            elog.completed = True
            break
        u = safety_input(x, env, scfg)
        elog.records.append({"k": k, "state": x.tolist(), "input": u.tolist(),
                             "mode": "safety", "N_k": 0})
        x = step(model, x, u)
        _check_step(env, x, u, cfg.limits, k)
        states.append(x)
        inputs.append(u)
    else:
        elog.completed = env.in_goal(x)
        if not elog.completed:
            elog.reason = "timeout"
    elog.wall_time = time.perf_counter() - t0
    return Execution(np.array(states), np.array(inputs).reshape(-1, 2), env), elog


# ---------------------------------------------------------- demonstrator

@dataclass(frozen=True)
class DemoConfig:
    hold: int = 10                   # fine steps per demonstrator decision
    horizon: int = 20                # coarse steps previewed
    passes: int = 2
    tube_margin: float = 1e-3
    terminal_weight: float = 1.0
    stage_weight: float = 0.1
    input_weight: float = 1e-3
    n_facets: int = 16
    max_time: float = 60.0           # seconds of simulated time
    dt: float = DEFAULT_DT
    limits: SystemLimits = field(default_factory=SystemLimits)


class DemoFailure(RuntimeError):
    pass


def _fine_maps(model, hold):
    """``(Am, Sm)`` with ``x_m = Am[m] x + Sm[m] u`` for ``m = 1..hold``."""
    Am, Sm = [], []
    A_pow = np.eye(4)
    S = np.zeros((4, 2))
    for _ in range(hold):
        S = model.A @ S + model.B
        A_pow = model.A @ A_pow
        Am.append(A_pow.copy())
        Sm.append(S.copy())
    return Am, Sm


def _demo_qp(x0, ref_fine, env, model, cfg, safe):
    """Coarse progress-maximizing QP; returns coarse inputs or None."""
    H, hold = cfg.horizon, cfg.hold
    Am, Sm = _fine_maps(model, hold)
    nX, nU = 4 * (H + 1), 2 * H
    n = nX + nU
    # plans end at the tube end, so shifted references may overshoot it slightly
    tube = linearize_tube(env, ref_fine, 0.0, clamp=True)
    if tube is None:
        return None
    rows_A, lo, hi = [], [], []

    def add(row, l, u):
        rows_A.append(row)
        lo.append(l)
        hi.append(u)

    # coarse dynamics
    Ac, Bc = Am[-1], Sm[-1]
    for i in range(4):
        r = np.zeros(n)
        r[i] = 1.0
        add(r, x0[i], x0[i])
    for j in range(H):
        for i in range(4):
            r = np.zeros(n)
            r[4 * (j + 1) + i] = 1.0
            r[4 * j:4 * j + 4] -= Ac[i]
            r[nX + 2 * j:nX + 2 * j + 2] -= Bc[i]
            add(r, 0.0, 0.0)
    fn, fo = polygon_facets(cfg.n_facets, cfg.limits.input_norm_max)
    for j in range(H):
        for a, b in zip(fn, fo):
            r = np.zeros(n)
            r[nX + 2 * j:nX + 2 * j + 2] = a
            add(r, -np.inf, b * (1 - 1e-6))
    half = 0.5 * env.width - cfg.tube_margin
    if safe is not None:
        half = min(half, safe.h_max - cfg.tube_margin)
    obj = np.zeros(n)
    for j in range(H):
        for m in range(hold):
            ts = tube[j * hold + m]
            # position rows of the fine state as a function of (X_j, U_j)
            M = np.zeros((2, n))
            M[:, 4 * j:4 * j + 4] = Am[m][POS]
            M[:, nX + 2 * j:nX + 2 * j + 2] = Sm[m][POS]
            c_n = float(ts.normal @ ts.origin)
            c_t = float(ts.tangent @ ts.origin)
            add(ts.normal @ M, c_n - half, c_n + half)
            add(ts.tangent @ M, c_t, c_t + ts.length)
            if m == hold - 1:
                w = cfg.stage_weight + (cfg.terminal_weight if j == H - 1 else 0.0)
                obj -= w * (ts.tangent @ M)
    # coarse node velocities: system box, safe speed polygon and heading cones
    for j in range(1, H + 1):
        for c, vi in enumerate((1, 3)):
            r = np.zeros(n)
            r[4 * j + vi] = 1.0
            add(r, cfg.limits.v_min[c], cfg.limits.v_max[c])
        if safe is None:
            continue
        sn, so = polygon_facets(cfg.n_facets, safe.v_max_safe)
        for a, b in zip(sn, so):
            r = np.zeros(n)
            r[4 * j + 1], r[4 * j + 3] = a
            add(r, -np.inf, b * (1 - 1e-6))
        near = {tube[i].seg for i in range(max(0, (j - 1) * hold), min(len(tube), (j + 1) * hold))}
        cmin = safe.heading_cos_min
        for sg in near:
            t, nn = env.tangents[sg], env.normals[sg]
            if cmin > 0:
                cc = min(1.0, cmin + 1e-3)
                sa = math.sqrt(1 - cc * cc)
                vecs = [sa * t - cc * nn, sa * t + cc * nn]
            elif cmin > -1:
                vecs = [t]
            else:
                vecs = []
            for v in vecs:
                r = np.zeros(n)
                r[4 * j + 1], r[4 * j + 3] = v
                add(r, 0.0, np.inf)
    P = np.zeros((n, n))
    iu = np.arange(nX, n)
    P[iu, iu] = 2 * cfg.input_weight
    qp = QPForm(P, obj, np.array(rows_A), np.array(lo), np.array(hi))
    res = qp_solve(qp, max_iter=80)
    if res.status != OPTIMAL:
        return None
    return res.x[nX:].reshape(H, 2)


def _fine_rollout(x0, U, model, hold):
    fine = np.repeat(U, hold, axis=0)
    return rollout(model, x0, fine), fine


def generate_demonstration(env, cfg=None, safe=None, x0=None):
    """Receding-horizon demonstration that knows the whole tube.

    Every `hold` fine steps a coarse QP maximizes (linearized) arc length
    over the preview horizon under the tube, limit and (optionally) safe-set
    constraints; its first coarse input is applied for `hold` fine steps.
    Starts at rest at the tube entry unless `x0` is given.  Raises
    :class:`DemoFailure` if the validated execution cannot be built.
    """
    cfg = cfg or DemoConfig()
    model = LinearModel.double_integrator(cfg.dt)
    x = make_state() if x0 is None else np.asarray(x0, dtype=float).copy()
    states, inputs = [x], []
    prev_U = None
    scfg = SafetyControllerCfg(dt=cfg.dt, limits=cfg.limits)
    n_coarse = int(math.ceil(cfg.max_time / (cfg.dt * cfg.hold)))
    done = False
    for _ in range(n_coarse):
        if prev_U is None:
            U_ref = np.zeros((cfg.horizon, 2))
        else:
            U_ref = np.vstack([prev_U[1:], np.zeros((1, 2))])
        U = None
        for _p in range(cfg.passes):
            ref, _ = _fine_rollout(x, U_ref, model, cfg.hold)
            cand = _demo_qp(x, ref[1:], env, model, cfg, safe)
            if cand is None:
                break
            U = cand
            U_ref = cand
        if U is None:
            log.info("demonstrator QP failed; using the safety controller for one block")
            block = []
            xs = x
            for _m in range(cfg.hold):
                u = safety_input(xs, env, scfg)
                block.append(u)
                xs = step(model, xs, u)
            block = np.array(block)
            prev_U = None
        else:
            block = np.repeat(U[:1], cfg.hold, axis=0)
            prev_U = U
        for u in block:
            u = np.asarray(u, dtype=float)
            nrm = math.hypot(u[0], u[1])
            if nrm > cfg.limits.input_norm_max:
                u = u * (cfg.limits.input_norm_max * (1 - 1e-12) / nrm)
            x = step(model, x, u)
            states.append(x)
            inputs.append(u)
            if not check_env_constraint(env, x) or not cfg.limits.state_ok(x):
                raise DemoFailure("demonstration left the feasible region")
            if env.in_goal(x):
                done = True
                break
        if done:
            break
    ex = Execution(np.array(states), np.array(inputs).reshape(-1, 2), env)
    ok, why = validate_execution(ex, env, model, cfg.limits)
    if not ok:
        raise DemoFailure(why)
    return ex


def recovery_starts(env, safe, n, seed, s_frac=0.7):
    """`n` safe-set states spread over the first `s_frac` of the tube.

    Runs started there show the demonstrator recovering from slow or
    off-line states that the closed loop visits but a run from rest never
    does.
    """
    if n <= 0:
        return np.zeros((0, 4))
    rng = np.random.default_rng([seed, 7919])
    X = sample_safe_states(safe, env, 4 * n, rng)
    s, *_ = env.project_many(X[:, POS])
    X = X[s <= s_frac * env.total_length]
    return X[:n]


def demonstrations_for(seeds, cfg=None, safe=None, tube_kwargs=None, max_regen=5,
                       n_recovery=0):
    """Demonstrations on generated tubes; a failing tube is replaced by the
    next seed in a disjoint range.

    Each tube gets one run from rest plus `n_recovery` runs from sampled
    safe-set states (requires `safe`); the returned `envs` repeats the tube
    for every execution on it.
    """
    tube_kwargs = tube_kwargs or {}
    if n_recovery and safe is None:
        raise ValueError("recovery demonstrations need a safe set to sample from")
    envs, exs = [], []
    for seed in seeds:
        s = seed
        for attempt in range(max_regen + 1):
            env = generate_tube(s, **tube_kwargs)
            try:
                ex = generate_demonstration(env, cfg, safe)
            except DemoFailure as err:
                log.warning("demonstration failed on tube seed %d (%s); regenerating", s, err)
                s = s + 1_000_003 * (attempt + 1)
                continue
            exs.append(ex)
            envs.append(env)
            for x0 in recovery_starts(env, safe, n_recovery, s):
                try:
                    exs.append(generate_demonstration(env, cfg, safe, x0))
                    envs.append(env)
                except DemoFailure as err:
                    log.warning("recovery demonstration on tube seed %d dropped (%s)", s, err)
            break
        else:
            raise DemoFailure(f"no demonstration for seed {seed} after {max_regen} retries")
    return envs, exs


# ----------------------------------------------------------------- metrics

def evaluate(executions, logs):
    """Aggregate metrics over episodes (deterministic)."""
    out = {"episodes": 0, "completions": 0, "duration_steps": [], "mean_duration_steps": 0.0,
           "wall_time": 0.0, "safety_mode_fraction": 0.0, "min_tube_margin": 0.0}
    if not executions:
        return out
    total = 0
    safety = 0
    margins = []
    for ex, lg in zip(executions, logs):
        out["episodes"] += 1
        out["completions"] += int(lg.completed)
        out["duration_steps"].append(int(ex.duration))
        out["wall_time"] += float(lg.wall_time)
        total += len(lg.records)
        safety += sum(1 for r in lg.records if r.get("mode") == "safety")
        env = ex.env
        s, h, seg, d, st = env.project_many(ex.states[:, POS])
        m = np.where(st == kernels.PROJ_OK, 0.5 * env.width - np.abs(h), -np.inf)
        margins.append(float(m.min()))
    out["mean_duration_steps"] = float(np.mean(out["duration_steps"]))
    out["safety_mode_fraction"] = safety / total if total else 0.0
    out["min_tube_margin"] = float(min(margins))
    return out
