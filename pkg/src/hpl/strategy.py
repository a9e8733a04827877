"""Strategy sets from GP posteriors, uncertainty gating, lifting, and the
rolling target-set list."""
from dataclasses import dataclass

import numpy as np

from .dynamics import POS, SystemLimits
from .environment import OutOfDomainError


@dataclass(frozen=True)
class HyperRect:
    lo: np.ndarray
    hi: np.ndarray
    empty: bool = False

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lo and hi dimensions differ")
        if not self.empty and np.any(lo > hi):
            raise ValueError("lo must not exceed hi")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def make_empty(cls, dim):
        return cls(np.full(dim, np.inf), np.full(dim, -np.inf), True)

    @property
    def dim(self):
        return self.lo.size

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half_width(self):
        return 0.5 * (self.hi - self.lo)

    def contains(self, p):
        if self.empty:
            return False
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def issubset(self, other):
        if self.empty:
            return True
        if other.empty:
            return False
        return bool(np.all(self.lo >= other.lo) and np.all(self.hi <= other.hi))

    def intersect(self, other):
        if self.empty or other.empty:
            return HyperRect.make_empty(self.dim)
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return HyperRect.make_empty(self.dim)
        return HyperRect(lo, hi)

    def __eq__(self, other):
        if not isinstance(other, HyperRect):
            return NotImplemented
        if self.empty or other.empty:
            return self.empty and other.empty and self.dim == other.dim
        return bool(np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    __hash__ = None

    def to_list(self):
        return None if self.empty else [self.lo.tolist(), self.hi.tolist()]


@dataclass(frozen=True)
class StrategyConfig:
    eta: float = 2.0
    d_thresh: np.ndarray = None
    T: int = 20
    N: int = 10
    ds: float = 0.1

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.T < 1 or self.N < 1:
            raise ValueError("T and N must be >= 1")
        d = np.full(4, np.inf) if self.d_thresh is None else self.d_thresh
        d = np.broadcast_to(np.asarray(d, dtype=float), (4,)).copy()
        if np.any(d < 0):
            raise ValueError("d_thresh must be non-negative")
        object.__setattr__(self, "d_thresh", d)


@dataclass(frozen=True)
class UncertaintyMeasure:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float).reshape(-1)
        if np.any(s < 0):
            raise ValueError("standard deviations must be non-negative")
        object.__setattr__(self, "sigmas", s)


def build_strategy_sets(models, z, cfg, base=None):
    """Rectangles ``mu +- eta*sigma`` for (s, h) and (ax, ay).

    `base` is added to the posterior means (the GPs regress offsets from the
    current strategy state).
    """
    z = np.asarray(z, dtype=float).reshape(1, -1)
    mu = np.empty(len(models))
    sig = np.empty(len(models))
    for i, m in enumerate(models):
        a, b = m.predict(z)
        mu[i], sig[i] = a[0], b[0]
    if base is not None:
        mu = mu + np.asarray(base, dtype=float)
    half = cfg.eta * sig
    xrect = HyperRect(mu[:2] - half[:2], mu[:2] + half[:2])
    urect = HyperRect(mu[2:] - half[2:], mu[2:] + half[2:])
    return xrect, urect, UncertaintyMeasure(sig)


def gate(c, cfg):
    """Accept iff every posterior std is at or below its threshold."""
    sig = c.sigmas if isinstance(c, UncertaintyMeasure) else np.asarray(c, dtype=float)
    if sig.shape != cfg.d_thresh.shape:
        raise ValueError("uncertainty and threshold dimensions differ")
    return bool(np.all(sig <= cfg.d_thresh))


@dataclass(frozen=True, eq=False)
class TargetSet:
    """Full states whose projection lies in `rect` and which are in the safe set."""
    rect: HyperRect
    env: object = None
    safe: object = None
    urect: HyperRect = None
    limits: SystemLimits = None

    @classmethod
    def make_empty(cls):
        return cls(HyperRect.make_empty(2))

    @property
    def empty(self):
        return self.rect.empty

    def contains(self, state):
        if self.empty:
            return False
        state = np.asarray(state, dtype=float)
        try:
            fc = self.env.project(state[POS])
        except OutOfDomainError:
            return False
        if not self.rect.contains([fc.s, fc.h]):
            return False
        return self.safe.contains(state, self.env, self.limits)

    def to_dict(self):
        return {"rect": self.rect.to_list(),
                "urect": None if self.urect is None else self.urect.to_list()}


EMPTY = TargetSet.make_empty()


def lift(xrect, env, safe, limits=None, urect=None):
    """Target set of `xrect` inside the safe set; EMPTY if they cannot meet."""
    if xrect.empty:
        return EMPTY
    bound = HyperRect([0.0, -safe.h_max], [env.total_length, safe.h_max])
    r = xrect.intersect(bound)
    if r.empty:
        return EMPTY
    return TargetSet(r, env, safe, urect, limits)


class TargetSetList:
    """Exactly T slots; slot ``i`` (1-based) holds the set for time ``k+i``."""

    def __init__(self, slots):
        self._slots = tuple(slots)
        if not self._slots:
            raise ValueError("a target-set list needs T >= 1 slots")

    @classmethod
    def empty(cls, T):
        return cls([EMPTY] * T)

    @property
    def T(self):
        return len(self._slots)

    def __len__(self):
        return len(self._slots)

    def __getitem__(self, i):
        """1-based slot access."""
        if not 1 <= i <= len(self._slots):
            raise IndexError(f"slot {i} outside 1..{len(self._slots)}")
        return self._slots[i - 1]

    @property
    def slots(self):
        return self._slots

    def nonempty(self):
        """1-based indices of the non-empty slots."""
        return [i + 1 for i, t in enumerate(self._slots) if not t.empty]

    def mark_empty(self, i):
        slots = list(self._slots)
        slots[i - 1] = EMPTY
        return TargetSetList(slots)

    def to_list(self):
        return [t.rect.to_list() for t in self._slots]


def advance(lst, newest):
    """Drop slot 1, age the rest by one step, append `newest` at slot T."""
    return TargetSetList(lst.slots[1:] + (newest,))
