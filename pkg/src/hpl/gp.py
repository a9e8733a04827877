"""Gaussian-process regression with a squared-exponential ARD kernel.

One independent GP is trained per output column.  Inputs are standardized
per dimension and outputs normalized before fitting; both transforms are
stored with the model and undone in :func:`posterior`.
"""
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from . import kernels
from .dynamics import POS
from .environment import forecast

log = logging.getLogger(__name__)

JITTER0 = 1e-8
JITTER_MAX = 1e-4
OUTPUT_NAMES = ("s", "h", "ax", "ay")
MODEL_VERSION = 1


class ConditioningError(np.linalg.LinAlgError):
    """The kernel matrix could not be factorized even with maximal jitter."""


@dataclass
class StrategyDataset:
    """Training pairs ``(z, y)``.

    `Z` rows are ``[state, slope forecast]``; `Y` columns are the strategy
    state ``(s, h)`` and input ``(ax, ay)`` T steps later.  `base` holds the
    per-row offsets the GPs regress around (the current ``(s, h)``), so that
    learned targets are relative to where the system is now.
    """
    Z: np.ndarray
    Y: np.ndarray
    base: np.ndarray = None
    task: np.ndarray = None

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.Z.shape[0] != self.Y.shape[0]:
            raise ValueError("Z and Y row counts differ")
        if self.base is None:
            self.base = np.zeros_like(self.Y)
        self.base = np.asarray(self.base, dtype=float).reshape(self.Y.shape)
        if self.task is None:
            self.task = np.zeros(len(self.Y), dtype=int)

    def __len__(self):
        return self.Z.shape[0]

    def target(self, col):
        return self.Y[:, col] - self.base[:, col]

    def subset(self, idx):
        return StrategyDataset(self.Z[idx], self.Y[idx], self.base[idx], self.task[idx])

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, 1)), np.zeros((0, 1)))
        return cls(np.vstack([p.Z for p in parts]), np.vstack([p.Y for p in parts]),
                   np.vstack([p.base for p in parts]), np.concatenate([p.task for p in parts]))


def query_vector(env, state, N, ds):
    """``[state, slope forecast of length N+1]``."""
    state = np.asarray(state, dtype=float)
    return np.concatenate([state, forecast(env, state, N, ds)])


def build_dataset(executions, envs, N, T, ds):
    """Rows ``j = 0 .. D-T`` of every execution.

    The output at step ``j+T`` pairs the strategy state of ``x_{j+T}`` with
    the input applied there; for ``j+T = D`` (no input is applied at the
    final state) the last input ``u_{D-1}`` is used.
    """
    if N < 1 or T < 1:
        raise ValueError("N and T must be >= 1")
    parts = []
    for i, (ex, env) in enumerate(zip(executions, envs)):
        X = np.asarray(ex.states)
        U = np.asarray(ex.inputs)
        D = len(U)
        if D < T:
            log.warning("execution %d has %d steps (< T=%d); skipped", i, D, T)
            continue
        s, h, *_ = env.project_many(X[:, POS])
        rows = D - T + 1
        Z = np.empty((rows, X.shape[1] + N + 1))
        Y = np.empty((rows, 4))
        B = np.zeros((rows, 4))
        for j in range(rows):
            Z[j] = query_vector(env, X[j], N, ds)
            k = j + T
            Y[j, 0], Y[j, 1] = s[k], h[k]
            Y[j, 2:] = U[min(k, D - 1)]
            B[j, 0], B[j, 1] = s[j], h[j]
        parts.append(StrategyDataset(Z, Y, B, np.full(rows, i)))
    return StrategyDataset.concat(parts)


# ------------------------------------------------------------------ kernel

@dataclass(frozen=True)
class KernelParams:
    sigma_f: float
    lengthscales: np.ndarray
    sigma_n: float = 0.0

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        object.__setattr__(self, "lengthscales", ls)
        if not self.sigma_f > 0 or not np.all(ls > 0):
            raise ValueError("sigma_f and lengthscales must be positive")
        if not self.sigma_n >= 0:
            raise ValueError("sigma_n must be non-negative")

    @property
    def dim(self):
        return self.lengthscales.size

    def to_log(self):
        """``[log sigma_f, log l_1..l_d, log sigma_n]``."""
        return np.concatenate([[math.log(self.sigma_f)], np.log(self.lengthscales),
                               [math.log(max(self.sigma_n, 1e-300))]])

    @classmethod
    def from_log(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]), float(np.exp(theta[-1])))

    def to_dict(self):
        return {"sigma_f": self.sigma_f, "lengthscales": self.lengthscales.tolist(),
                "sigma_n": self.sigma_n}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["sigma_f"]), np.array(d["lengthscales"], dtype=float),
                   float(d["sigma_n"]))


def kernel_eval(p, z1, z2):
    z1 = np.asarray(z1, dtype=float).reshape(-1)
    z2 = np.asarray(z2, dtype=float).reshape(-1)
    if not (z1.size == z2.size == p.dim):
        raise ValueError(f"dimension mismatch: {z1.size}, {z2.size}, kernel {p.dim}")
    r = (z1 - z2) / p.lengthscales
    return p.sigma_f ** 2 * math.exp(-0.5 * float(r @ r))


def gram(p, Z1, Z2):
    Z1 = np.ascontiguousarray(Z1, dtype=float)
    Z2 = np.ascontiguousarray(Z2, dtype=float)
    if Z1.shape[1] != p.dim or Z2.shape[1] != p.dim:
        raise ValueError("dimension mismatch with kernel lengthscales")
    return kernels.ard_gram(Z1, Z2, p.sigma_f ** 2, p.lengthscales)


def factorize(K, noise_var):
    """Cholesky of ``K + (noise_var + jitter) I`` with escalating jitter."""
    n = K.shape[0]
    jitter = JITTER0
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(K + (noise_var + jitter) * np.eye(n))
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise ConditioningError("kernel matrix not positive definite after jitter escalation")


def _lml_core(theta, Z, y):
    """Value and gradient of the log marginal likelihood in log-parameters."""
    p = KernelParams.from_log(theta)
    n = len(y)
    Kf = gram(p, Z, Z)
    L, _ = factorize(Kf, p.sigma_n ** 2)
    alpha = scipy.linalg.cho_solve((L, True), y)
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    Kinv = scipy.linalg.cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    S = W * Kf
    grad = np.empty_like(theta)
    grad[0] = S.sum()                                   # dK/dlog sf = 2 Kf
    rs = S.sum(axis=1)
    ls2 = p.lengthscales ** 2
    # sum_ij S_ij (z_im - z_jm)^2 = 2 sum_i rs_i z_im^2 - 2 z_m' S z_m
    quad = 2.0 * (rs @ (Z * Z)) - 2.0 * np.einsum("im,ij,jm->m", Z, S, Z)
    grad[1:-1] = 0.5 * quad / ls2
    grad[-1] = np.trace(W) * p.sigma_n ** 2             # dK/dlog sn = 2 sn^2 I
    return float(value), grad


def log_marginal_likelihood(p, d, col=0):
    """``(value, gradient)`` of column `col` of dataset `d` under kernel `p`.

    The gradient is over ``KernelParams.to_log()`` coordinates.
    """
    if len(d) == 0:
        raise ValueError("empty dataset")
    return _lml_core(p.to_log(), d.Z, d.target(col))


# ------------------------------------------------------------------ models

@dataclass
class GPModel:
    params: KernelParams
    Z_train: np.ndarray                 # raw (unstandardized) inputs
    y_train: np.ndarray                 # raw targets
    z_mean: np.ndarray = None
    z_std: np.ndarray = None
    y_mean: float = 0.0
    y_scale: float = 1.0
    train_resid_std: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)
    jitter: float = field(default=JITTER0, repr=False)
    trace_checksum: float = field(default=None, repr=False)

    def __post_init__(self):
        self.Z_train = np.atleast_2d(np.asarray(self.Z_train, dtype=float))
        self.y_train = np.asarray(self.y_train, dtype=float).reshape(-1)
        d = self.Z_train.shape[1]
        self.z_mean = np.zeros(d) if self.z_mean is None else np.asarray(self.z_mean, float)
        self.z_std = np.ones(d) if self.z_std is None else np.asarray(self.z_std, float)
        if self.chol is None:
            self._factor()

    def _factor(self):
        Zs = self._std(self.Z_train)
        K = gram(self.params, Zs, Zs)
        self.chol, self.jitter = factorize(K, self.params.sigma_n ** 2)
        yn = (self.y_train - self.y_mean) / self.y_scale
        self.alpha = scipy.linalg.cho_solve((self.chol, True), yn)
        self.trace_checksum = float(np.trace(K))

    def _std(self, Z):
        return (np.atleast_2d(Z) - self.z_mean) / self.z_std

    @property
    def dim(self):
        return self.Z_train.shape[1]

    def covariance(self):
        """``K + (sigma_n^2 + jitter) I`` in standardized input space."""
        Zs = self._std(self.Z_train)
        K = gram(self.params, Zs, Zs)
        return K + (self.params.sigma_n ** 2 + self.jitter) * np.eye(len(K))

    def predict(self, Zq):
        """Vectorized posterior: arrays ``(mu, sigma)`` in raw output units."""
        Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
        if Zq.shape[1] != self.dim:
            raise ValueError(f"query dimension {Zq.shape[1]} != model dimension {self.dim}")
        Ks = gram(self.params, self._std(Zq), self._std(self.Z_train))
        mu = Ks @ self.alpha
        v = scipy.linalg.solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = self.params.sigma_f ** 2 - (v * v).sum(axis=0)
        sigma = np.sqrt(np.maximum(var, 0.0))
        return self.y_mean + self.y_scale * mu, self.y_scale * sigma

    def raw_params(self):
        """Hyperparameters mapped back to raw input/output units."""
        p = self.params
        return KernelParams(p.sigma_f * self.y_scale, p.lengthscales * self.z_std,
                            p.sigma_n * self.y_scale)

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        return {"version": MODEL_VERSION, "params": self.params.to_dict(),
                "z_mean": self.z_mean.tolist(), "z_std": self.z_std.tolist(),
                "y_mean": self.y_mean, "y_scale": self.y_scale,
                "train_resid_std": self.train_resid_std,
                "Z_train": self.Z_train.tolist(), "y_train": self.y_train.tolist(),
                "alpha": self.alpha.tolist(), "jitter": self.jitter,
                "trace_checksum": self.trace_checksum}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported GP model version {d.get('version')}")
        m = cls(KernelParams.from_dict(d["params"]), np.array(d["Z_train"]),
                np.array(d["y_train"]), np.array(d["z_mean"]), np.array(d["z_std"]),
                float(d["y_mean"]), float(d["y_scale"]), float(d["train_resid_std"]))
        if abs(m.trace_checksum - d["trace_checksum"]) > 1e-6 * max(1.0, abs(d["trace_checksum"])):
            raise ValueError("GP checksum mismatch: stored kernel trace does not match data")
        if np.abs(m.alpha - np.array(d["alpha"])).max(initial=0.0) > 1e-6 * (1 + np.abs(m.alpha).max(initial=0.0)):
            raise ValueError("GP checksum mismatch: stored alpha does not match refactorization")
        return m

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def posterior(m, z):
    """``(mu, sigma)`` at a single query vector."""
    mu, sigma = m.predict(np.asarray(z, dtype=float).reshape(1, -1))
    return float(mu[0]), float(sigma[0])


def _standardizer(Z):
    mean = Z.mean(axis=0)
    std = Z.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def farthest_point_subset(Z, k, rng):
    """Indices of `k` rows chosen greedily to cover `Z` (sorted).

    Starts from a random row and repeatedly adds the row farthest (in
    per-column standardized coordinates) from everything chosen so far.
    Consecutive samples of a trajectory are nearly identical, so uniform
    sampling spends most points on cruising and misses short transients.
    """
    n = Z.shape[0]
    if k >= n:
        return np.arange(n)
    mean, std = _standardizer(Z)
    Zs = (Z - mean) / std
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((Zs - Zs[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        j = int(np.argmax(d2))
        chosen[i] = j
        d2 = np.minimum(d2, np.sum((Zs - Zs[j]) ** 2, axis=1))
    return np.sort(chosen)


def fit(d, col=0, restarts=5, seed=0, max_points=None, standardize=True,
        log_bounds=((-5.0, 5.0), (-4.6, 6.9), (-9.2, 1.0)), maxiter=200,
        subset="farthest"):
    """Maximum-likelihood GP for column `col` of `d`.

    The first start is deterministic (unit signal and lengthscales, noise
    0.1); the rest draw lengthscales log-uniformly over ``[1e-2, 1e2]``
    times each dimension's range.  `log_bounds` bound ``log sigma_f``,
    ``log l_m`` and ``log sigma_n`` in normalized units.  With more than
    `max_points` rows the model is fit on a subset picked by `subset`
    (``"farthest"`` for coverage, ``"random"`` for uniform sampling).
    """
    if len(d) < 2:
        raise ValueError("need at least 2 training rows")
    rng = np.random.default_rng(seed)
    full = d
    if max_points is not None and len(d) > max_points:
        if subset == "farthest":
            idx = farthest_point_subset(d.Z, max_points, rng)
        elif subset == "random":
            idx = np.sort(rng.choice(len(d), size=max_points, replace=False))
        else:
            raise ValueError(f"unknown subset rule {subset!r}")
        d = d.subset(idx)
    Z = d.Z
    y = d.target(col)
    if standardize:
        z_mean, z_std = _standardizer(Z)
        y_mean = float(y.mean())
        y_scale = float(y.std())
        if y_scale < 1e-12:
            y_scale = 1.0
    else:
        z_mean, z_std = np.zeros(Z.shape[1]), np.ones(Z.shape[1])
        y_mean, y_scale = 0.0, 1.0
    Zs = (Z - z_mean) / z_std
    yn = (y - y_mean) / y_scale
    dim = Z.shape[1]
    ranges = np.ptp(Zs, axis=0)
    ranges = np.where(ranges > 1e-12, ranges, 1.0)
    bounds = [log_bounds[0]] + [log_bounds[1]] * dim + [log_bounds[2]]

    def neg(theta):
        try:
            v, g = _lml_core(theta, Zs, yn)
        except ConditioningError:
            return 1e25, np.zeros_like(theta)
        return -v, -g

    best = None
    for r in range(max(1, restarts)):
        if r == 0:
            theta0 = np.concatenate([[0.0], np.zeros(dim), [math.log(0.1)]])
        else:
            ls = ranges * np.exp(rng.uniform(math.log(1e-2), math.log(1e2), dim))
            theta0 = np.concatenate([[rng.uniform(-1.0, 1.0)], np.log(ls),
                                     [rng.uniform(math.log(1e-3), 0.0)]])
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter})
        if res.fun >= 1e25:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise ConditioningError("all restarts failed to factorize the kernel matrix")
    m = GPModel(KernelParams.from_log(best.x), Z, y, z_mean, z_std, y_mean, y_scale)
    # residuals over every training row, including rows left out of the
    # active subset, so the value reflects out-of-subset accuracy
    mu, _ = m.predict(full.Z)
    m.train_resid_std = float(np.std(full.target(col) - mu))
    return m


def model_from_data(params, Z, y):
    """GP with fixed hyperparameters and no input/output transforms."""
    return GPModel(params, Z, y)
