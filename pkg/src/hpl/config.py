"""Project configuration: one TOML file with a section per pipeline stage.

Every key is optional; unknown sections or keys are rejected so typos fail
loudly.  Command-line flags are applied on top with :func:`override`.
"""
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import DEFAULT_DT, SystemLimits
from .harness import BUNDLE_VERSION, DemoConfig, RunConfig, TrainConfig
from .mpc import MPCConfig
from .safety import SafeSetSpec, SafetyControllerCfg


class ConfigKeyError(ValueError):
    """Unknown or malformed configuration entry."""


@dataclass(frozen=True)
class TubeSection:
    n_segments: int = 4
    slope_range: tuple = (-1.0, 1.0)
    seg_length_range: tuple = (1.0, 2.0)
    width: float = 1.0


@dataclass(frozen=True)
class SafeSection:
    h_max: float = 0.2
    v_max_safe: float = 0.8
    heading_cos_min: float = 0.6


@dataclass(frozen=True)
class LimitsSection:
    v_max: float = 3.0
    input_norm_max: float = 1.0


@dataclass(frozen=True)
class DemoSection:
    hold: int = 10
    horizon: int = 20
    max_time: float = 60.0
    n_recovery: int = 3


@dataclass(frozen=True)
class TrainSection:
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


@dataclass(frozen=True)
class RunSection:
    eta: float = None
    d_thresh: tuple = None
    max_steps: int = None
    dt: float = DEFAULT_DT
    v_ref: float = 0.5
    n_facets: int = 16
    passes: int = 2
    use_input_rect: bool = False
    workers: int = 1


@dataclass(frozen=True)
class PlotSection:
    target_every: int = 100
    width_px: int = 900
    height_px: int = 600


_SECTIONS = {"tubes": TubeSection, "safe": SafeSection, "limits": LimitsSection,
             "demo": DemoSection, "train": TrainSection, "run": RunSection,
             "plot": PlotSection}


@dataclass(frozen=True)
class ProjectConfig:
    seed: int = 0
    bundle_version: int = BUNDLE_VERSION
    tubes: TubeSection = field(default_factory=TubeSection)
    safe: SafeSection = field(default_factory=SafeSection)
    limits: LimitsSection = field(default_factory=LimitsSection)
    demo: DemoSection = field(default_factory=DemoSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)
    plot: PlotSection = field(default_factory=PlotSection)

    # -- views used by the pipeline ---------------------------------------
    def tube_kwargs(self):
        t = self.tubes
        return {"n_segments": t.n_segments, "slope_range": tuple(t.slope_range),
                "seg_length_range": tuple(t.seg_length_range), "width": t.width}

    def safe_spec(self):
        s = self.safe
        return SafeSetSpec(s.h_max, s.v_max_safe, s.heading_cos_min)

    def system_limits(self):
        v = self.limits.v_max
        return SystemLimits([-v, -v], [v, v], self.limits.input_norm_max)

    def demo_config(self):
        d = self.demo
        return DemoConfig(hold=d.hold, horizon=d.horizon, max_time=d.max_time,
                          dt=self.run.dt, limits=self.system_limits())

    def train_config(self):
        t = self.train
        return TrainConfig(T=t.T, N=t.N, ds=t.ds, eta=t.eta, threshold_rule=t.threshold_rule,
                           threshold_quantile=t.threshold_quantile, cv_folds=t.cv_folds,
                           d_thresh_scale=t.d_thresh_scale, gate_inputs=t.gate_inputs,
                           restarts=t.restarts, max_points=t.max_points, seed=self.seed)

    def run_config(self):
        r = self.run
        d = None if r.d_thresh is None else [math.inf if v is None else float(v)
                                             for v in r.d_thresh]
        return RunConfig(eta=r.eta, d_thresh=d, max_steps=r.max_steps, seed=self.seed, dt=r.dt,
                         limits=self.system_limits(),
                         mpc=MPCConfig(n_facets=r.n_facets, passes=r.passes,
                                       use_input_rect=r.use_input_rect),
                         safety=SafetyControllerCfg(v_ref=r.v_ref, dt=r.dt,
                                                    limits=self.system_limits()))

    def to_dict(self):
        return asdict(self)


def _section(cls, name, values):
    if not isinstance(values, dict):
        raise ConfigKeyError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigKeyError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return replace(cls(), **conv)


def from_dict(d):
    """Build a :class:`ProjectConfig`, rejecting unknown sections and keys."""
    top = {"seed", "bundle_version"}
    extra = set(d) - top - set(_SECTIONS)
    if extra:
        raise ConfigKeyError(f"unknown top-level key(s): {', '.join(sorted(extra))}")
    kw = {k: d[k] for k in top if k in d}
    for name, cls in _SECTIONS.items():
        if name in d:
            kw[name] = _section(cls, name, d[name])
    return ProjectConfig(**kw)


def load(path=None):
    """Defaults when `path` is None, else the parsed TOML file."""
    if path is None:
        return ProjectConfig()
    with open(path, "rb") as f:
        return from_dict(tomllib.load(f))


def override(cfg, **flags):
    """Apply command-line flags (None means "not given"); flags win."""
    if flags.get("seed") is not None:
        cfg = replace(cfg, seed=int(flags["seed"]))
    return cfg
