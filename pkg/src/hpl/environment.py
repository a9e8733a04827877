"""Constant-width tubes with piecewise-constant centerline slope.

The centerline starts at the origin and always advances in +x.  Frenet
coordinates are ``(s, h)``: arc length of the closest centerline point and the
signed distance to it (positive left of the travel direction).
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import POS, VEL

PROJ_TOL = 1e-12
SLOPE_MAX = 2.0


class OutOfDomainError(ValueError):
    """A point cannot be projected onto the tube."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TubeSegment:
    length: float
    slope: float

    def __post_init__(self):
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "slope", float(self.slope))
        if not self.length > 0:
            raise ConfigError(f"segment length must be positive, got {self.length}")
        if not math.isfinite(self.slope):
            raise ConfigError("segment slope must be finite")


@dataclass(frozen=True)
class FrenetCoord:
    s: float
    h: float
    segment: int = 0


@dataclass(frozen=True)
class TubeEnvironment:
    segments: tuple
    width: float
    seed: int = field(default=None, compare=False)

    starts: np.ndarray = field(init=False, repr=False, compare=False)
    tangents: np.ndarray = field(init=False, repr=False, compare=False)
    normals: np.ndarray = field(init=False, repr=False, compare=False)
    lengths: np.ndarray = field(init=False, repr=False, compare=False)
    cum_s: np.ndarray = field(init=False, repr=False, compare=False)
    slopes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        segs = tuple(s if isinstance(s, TubeSegment) else TubeSegment(*s) for s in self.segments)
        if not segs:
            raise ConfigError("a tube needs at least one segment")
        if not self.width > 0:
            raise ConfigError("tube width must be positive")
        object.__setattr__(self, "segments", segs)
        slopes = np.array([s.slope for s in segs])
        lengths = np.array([s.length for s in segs])
        tangents = np.stack([np.ones_like(slopes), slopes], axis=1)
        tangents /= np.hypot(tangents[:, 0], tangents[:, 1])[:, None]
        normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
        starts = np.zeros((len(segs) + 1, 2))
        starts[1:] = np.cumsum(tangents * lengths[:, None], axis=0)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        for name, val in [("starts", starts), ("tangents", tangents), ("normals", normals),
                          ("lengths", lengths), ("cum_s", cum), ("slopes", slopes)]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    # -- geometry ---------------------------------------------------------
    @property
    def n_segments(self):
        return len(self.segments)

    @property
    def total_length(self):
        return float(self.cum_s[-1])

    @property
    def breakpoints(self):
        return self.starts

    @property
    def s_goal(self):
        """Entry threshold of the task target region."""
        return max(self.total_length - self.width, 0.5 * self.total_length)

    def segment_at(self, s):
        """Index of the segment containing arc length `s` (right-continuous)."""
        if not (-PROJ_TOL <= s <= self.total_length + PROJ_TOL):
            raise OutOfDomainError(f"arc length {s} outside [0, {self.total_length}]")
        return int(np.searchsorted(self.cum_s[1:-1], s, side="right"))

    def point_at(self, s):
        i = self.segment_at(s)
        return self.starts[i] + (s - self.cum_s[i]) * self.tangents[i]

    def frenet_to_cartesian(self, s, h):
        i = self.segment_at(s)
        return self.starts[i] + (s - self.cum_s[i]) * self.tangents[i] + h * self.normals[i]

    def project_many(self, points):
        """Vectorized projection: returns (s, h, seg, dist, status)."""
        P = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        return kernels.project_points(P, self.starts[:-1].copy(), self.tangents.copy(),
                                      self.lengths.copy(), self.cum_s.copy(), PROJ_TOL)

    def project(self, p):
        s, h, seg, dist, status = self.project_many(np.asarray(p, dtype=float).reshape(1, 2))
        if status[0] != kernels.PROJ_OK:
            raise OutOfDomainError(f"point {p} lies beyond the tube extent")
        if dist[0] > self.width:
            raise OutOfDomainError(f"point {p} is {dist[0]:.3g} m from the centerline")
        return FrenetCoord(float(s[0]), float(h[0]), int(seg[0]))

    def contains(self, state):
        return check_env_constraint(self, state)

    def in_goal(self, state):
        try:
            fc = self.project(np.asarray(state)[POS])
        except OutOfDomainError:
            return False
        return fc.s >= self.s_goal and abs(fc.h) <= 0.5 * self.width

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        d = {"width": self.width,
             "segments": [{"length": s.length, "slope": s.slope} for s in self.segments]}
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"width", "segments", "seed"}
        if extra:
            raise ConfigError(f"unknown tube fields: {sorted(extra)}")
        segs = tuple(TubeSegment(float(s["length"]), float(s["slope"])) for s in d["segments"])
        return cls(segs, float(d["width"]), d.get("seed"))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def save_tube(env, path):
    with open(path, "w") as f:
        f.write(env.to_json())


def load_tube(path):
    with open(path) as f:
        return TubeEnvironment.from_json(f.read())


def project_to_centerline(env, p):
    return env.project(p)


def descriptor(env, s):
    """Local slope at arc length `s`; right-continuous at joints."""
    return float(env.slopes[env.segment_at(s)])


def forecast(env, state, N, ds):
    """Slopes at ``s0, s0+ds, ..., s0+N*ds`` ahead of the state's projection."""
    s0 = env.project(np.asarray(state)[POS]).s
    s = np.minimum(s0 + ds * np.arange(N + 1), env.total_length)
    idx = np.searchsorted(env.cum_s[1:-1], s, side="right")
    return env.slopes[idx].copy()


def check_env_constraint(env, state):
    try:
        fc = env.project(np.asarray(state)[POS])
    except OutOfDomainError:
        return False
    return abs(fc.h) <= 0.5 * env.width


def tube_margin(env, state):
    """``width/2 - |h|``; -inf when the point cannot be projected."""
    try:
        fc = env.project(np.asarray(state)[POS])
    except OutOfDomainError:
        return -math.inf
    return 0.5 * env.width - abs(fc.h)


def tangent_speed(env, state, seg):
    return float(env.tangents[seg] @ np.asarray(state)[VEL])


def generate_tube(seed, n_segments=4, slope_range=(-1.0, 1.0), seg_length_range=(1.0, 2.0),
                  width=1.0, slope_max=SLOPE_MAX, min_slope_change=0.2):
    """Random tube, deterministic in `seed`; consecutive slopes differ."""
    lo, hi = map(float, slope_range)
    llo, lhi = map(float, seg_length_range)
    if n_segments < 1:
        raise ConfigError("n_segments must be >= 1")
    if not (lo <= hi and llo <= lhi and llo > 0 and width > 0):
        raise ConfigError("invalid tube generation ranges")
    if max(abs(lo), abs(hi)) > slope_max:
        raise ConfigError(f"slopes must stay within +-{slope_max}")
    if n_segments > 1 and hi - lo < 2 * min_slope_change:
        raise ConfigError("slope range too narrow for the required slope change")
    rng = np.random.default_rng(seed)
    slopes = []
    for _ in range(n_segments):
        for _attempt in range(1000):
            m = rng.uniform(lo, hi)
            if not slopes or abs(m - slopes[-1]) >= min_slope_change:
                break
        slopes.append(float(m))
    lengths = rng.uniform(llo, lhi, size=n_segments)
    segs = tuple(TubeSegment(float(L), m) for L, m in zip(lengths, slopes))
    return TubeEnvironment(segs, float(width), seed)


def reverse_tube(env):
    """The same tube traversed backwards, mirrored so travel stays in +x."""
    segs = tuple(TubeSegment(s.length, -s.slope if s.slope != 0 else 0.0)
                 for s in reversed(env.segments))
    return TubeEnvironment(segs, env.width, env.seed)
