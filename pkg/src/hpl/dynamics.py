"""End-effector model: a planar double integrator per axis.

States are numpy arrays ``[x, vx, y, vy]`` and inputs ``[ax, ay]``.
"""
from dataclasses import dataclass, field

import numpy as np

# state layout
X, VX, Y, VY = 0, 1, 2, 3
POS = np.array([X, Y])
VEL = np.array([VX, VY])

DEFAULT_DT = 0.01


class InvalidModelError(ValueError):
    """Raised when stepping the model produces non-finite values."""


def make_state(x=0.0, vx=0.0, y=0.0, vy=0.0):
    return np.array([x, vx, y, vy], dtype=float)


def make_input(ax=0.0, ay=0.0):
    return np.array([ax, ay], dtype=float)


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.shape != (4, 4) or B.shape != (4, 2):
            raise ValueError(f"expected A 4x4 and B 4x2, got {A.shape}, {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @classmethod
    def double_integrator(cls, dt=DEFAULT_DT):
        A = np.array([[1.0, dt, 0.0, 0.0],
                      [0.0, 1.0, 0.0, 0.0],
                      [0.0, 0.0, 1.0, dt],
                      [0.0, 0.0, 0.0, 1.0]])
        B = np.array([[0.0, 0.0],
                      [dt, 0.0],
                      [0.0, 0.0],
                      [0.0, dt]])
        return cls(A, B, dt)

    def lifted(self, steps):
        """Model of `steps` fine steps with the input held constant."""
        A = np.linalg.matrix_power(self.A, steps)
        B = np.zeros_like(self.B)
        Ak = np.eye(4)
        for _ in range(steps):
            B = B + Ak @ self.B
            Ak = Ak @ self.A
        return LinearModel(A, B, self.dt * steps)


def step(model, s, u):
    """One exact step ``A s + B u``."""
    nxt = model.A @ np.asarray(s, dtype=float) + model.B @ np.asarray(u, dtype=float)
    if not np.all(np.isfinite(nxt)):
        raise InvalidModelError(f"non-finite state after step: {nxt}")
    return nxt


def rollout(model, s0, inputs):
    """States ``[s0, s1, ..., sN]`` produced by applying `inputs` in order."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    out = np.empty((len(inputs) + 1, 4))
    out[0] = s0
    for k, u in enumerate(inputs):
        out[k + 1] = model.A @ out[k] + model.B @ u
    if not np.all(np.isfinite(out)):
        raise InvalidModelError("non-finite state in rollout")
    return out


@dataclass(frozen=True)
class SystemLimits:
    v_min: np.ndarray = field(default_factory=lambda: np.array([-3.0, -3.0]))
    v_max: np.ndarray = field(default_factory=lambda: np.array([3.0, 3.0]))
    input_norm_max: float = 1.0

    def __post_init__(self):
        v_min = np.asarray(self.v_min, dtype=float).reshape(2)
        v_max = np.asarray(self.v_max, dtype=float).reshape(2)
        if not np.all(v_min < v_max):
            raise ValueError("v_min must be strictly below v_max")
        if not self.input_norm_max > 0:
            raise ValueError("input_norm_max must be positive")
        object.__setattr__(self, "v_min", v_min)
        object.__setattr__(self, "v_max", v_max)

    def state_ok(self, s):
        v = np.asarray(s)[VEL]
        return bool(np.all(v >= self.v_min) and np.all(v <= self.v_max))

    def input_ok(self, u):
        return bool(np.hypot(u[0], u[1]) <= self.input_norm_max)

    def to_dict(self):
        return {"v_min": self.v_min.tolist(), "v_max": self.v_max.tolist(),
                "input_norm_max": self.input_norm_max}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["v_min"]), np.array(d["v_max"]), float(d["input_norm_max"]))


def check_system_limits(s, u, lim):
    """True iff velocities lie in the (closed) box and the input in the norm ball."""
    return lim.state_ok(s) and lim.input_ok(u)
