import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpl import kernels
from hpl.dynamics import LinearModel, make_state, step
from hpl.environment import (ConfigError, OutOfDomainError, TubeEnvironment, TubeSegment,
                             check_env_constraint, descriptor, forecast, generate_tube,
                             load_tube, project_to_centerline, reverse_tube, save_tube)


def two_segment(width=1.0):
    return TubeEnvironment((TubeSegment(2.0, 0.0), TubeSegment(2.0, 1.0)), width)


def densified_nearest(env, p, n=100_000):
    """Brute-force projection onto a finely sampled centerline."""
    s = np.linspace(0.0, env.total_length, n)
    pts = np.array([env.point_at(v) for v in s])
    i = int(np.argmin(np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])))
    return s[i], float(np.hypot(*(pts[i] - p)))


def test_project_straight_segment():
    env = TubeEnvironment((TubeSegment(3.0, 0.0),), 1.0)
    fc = project_to_centerline(env, np.array([1.0, 0.3]))
    assert fc.s == pytest.approx(1.0) and fc.h == pytest.approx(0.3)


def test_breakpoints_project_to_zero_offset():
    env = generate_tube(3)
    for p in env.breakpoints:
        assert abs(env.project(p).h) < 1e-12


def test_projection_near_joint_matches_densified_polyline():
    env = two_segment()
    rng = np.random.default_rng(1)
    joint = env.starts[1]
    for _ in range(20):
        p = joint + rng.uniform(-0.4, 0.4, 2)
        fc = env.project(p)
        s_ref, d_ref = densified_nearest(env, p)
        assert abs(fc.s - s_ref) < 1e-4
        assert abs(abs(fc.h) - d_ref) < 1e-4


def test_projection_errors_outside_domain():
    env = two_segment()
    with pytest.raises(OutOfDomainError):
        env.project(np.array([-0.5, 0.0]))
    with pytest.raises(OutOfDomainError):
        env.project(np.array([1.0, 5.0]))


def test_descriptor_examples():
    env = two_segment()
    assert descriptor(env, 0.0) == 0.0
    assert descriptor(env, 2.0) == 1.0  # right-continuous at the joint
    assert descriptor(env, env.total_length) == 1.0
    with pytest.raises(OutOfDomainError):
        descriptor(env, env.total_length + 0.1)


def test_descriptor_matches_linear_scan():
    env = generate_tube(8, n_segments=6)
    rng = np.random.default_rng(2)
    for s in rng.uniform(0, env.total_length, 500):
        acc, idx = 0.0, 0
        for i, seg in enumerate(env.segments):
            if s >= acc:
                idx = i
            acc += seg.length
        assert descriptor(env, s) == env.segments[idx].slope


def test_descriptor_has_n_minus_one_discontinuities():
    env = generate_tube(4, n_segments=5)
    s = np.linspace(0, env.total_length, 20001)
    vals = np.array([descriptor(env, v) for v in s])
    assert int(np.count_nonzero(np.diff(vals))) == env.n_segments - 1


def test_forecast_examples():
    straight = TubeEnvironment((TubeSegment(5.0, 0.5),), 1.0)
    x = make_state(1.0, 0, 0.5, 0)
    assert np.all(forecast(straight, x, 10, 0.1) == 0.5)
    env = two_segment()
    # start at s=1.55: samples 1.55 ... 2.55 cross the joint at s=2 (index 5)
    f = forecast(env, make_state(1.55, 0, 0, 0), 10, 0.1)
    assert len(f) == 11
    assert np.count_nonzero(np.diff(f)) == 1 and np.argmax(np.diff(f) != 0) + 1 == 5
    end = env.point_at(env.total_length - 0.05)
    f = forecast(env, make_state(end[0], 0, end[1], 0), 10, 0.1)
    assert np.all(f == 1.0)


def test_env_constraint_is_closed():
    env = TubeEnvironment((TubeSegment(3.0, 0.0),), 1.0)
    assert check_env_constraint(env, make_state(1.0, 0, 0.0, 0))
    assert check_env_constraint(env, make_state(1.0, 0, 0.5, 0))
    assert not check_env_constraint(env, make_state(1.0, 0, 0.5 + 1e-6, 0))


def test_generate_tube_determinism_and_straight_case():
    assert generate_tube(5) == generate_tube(5)
    env = generate_tube(5, n_segments=1)
    assert env.n_segments == 1
    with pytest.raises(ConfigError):
        generate_tube(1, seg_length_range=(2.0, 1.0))
    with pytest.raises(ConfigError):
        generate_tube(1, width=0.0)


def test_random_tube_invariant_sweep():
    for seed in range(1000):
        env = generate_tube(seed)
        L = np.array([s.length for s in env.segments])
        m = np.array([s.slope for s in env.segments])
        assert np.all(L > 0) and np.all(np.abs(m) <= 2.0)
        assert np.all(np.abs(np.diff(m)) > 0)
        assert env.total_length == pytest.approx(L.sum())
        chord = np.diff(env.starts, axis=0)
        assert np.allclose(np.hypot(chord[:, 0], chord[:, 1]), L)
        assert np.allclose(chord[:, 1] / chord[:, 0], m)
        assert 0 < env.s_goal <= env.total_length


def test_reverse_tube_examples():
    env = generate_tube(11)
    assert reverse_tube(reverse_tube(env)) == env
    straight = TubeEnvironment((TubeSegment(3.0, 0.0),), 1.0)
    assert reverse_tube(straight) == straight
    r = reverse_tube(TubeEnvironment((TubeSegment(1.0, 0.0), TubeSegment(1.0, 1.0)), 1.0))
    assert [s.slope for s in r.segments] == [-1.0, 0.0]
    assert r.total_length == pytest.approx(2.0)


def test_json_round_trip(tmp_path):
    env = generate_tube(12)
    path = tmp_path / "t.json"
    save_tube(env, path)
    assert load_tube(path) == env
    with pytest.raises(ConfigError):
        TubeEnvironment.from_dict({"width": 1, "segments": [], "colour": 1})


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.02, 0.98), st.floats(-0.45, 0.45))
def test_frenet_round_trip_on_segment_interiors(seed, frac, h):
    env = generate_tube(seed)
    i = int(frac * env.n_segments)
    local = (frac * env.n_segments - i)
    s = env.cum_s[i] + (0.05 + 0.9 * local) * env.lengths[i]
    p = env.frenet_to_cartesian(s, h)
    fc = env.project(p)
    back = env.point_at(fc.s) + fc.h * env.normals[env.segment_at(fc.s)]
    if abs(fc.s - s) < 1e-9:  # interior of the same segment (no closer segment)
        assert np.allclose(back, p, atol=1e-9)
    # the projection is never farther than the constructed offset
    assert abs(fc.h) <= abs(h) + 1e-12


def test_s_monotone_along_forward_run():
    env = generate_tube(21)
    model = LinearModel.double_integrator()
    t = env.tangents[0]
    x = make_state(0.0, 0.3 * t[0], 0.0, 0.3 * t[1])
    last = -1.0
    for _ in range(300):
        fc = env.project(x[[0, 2]])
        assert fc.s >= last - 1e-12
        last = fc.s
        x = step(model, x, np.zeros(2))
        if not check_env_constraint(env, x):
            break


def test_numpy_and_loop_projection_agree():
    rng = np.random.default_rng(3)
    for seed in range(20):
        env = generate_tube(seed)
        P = np.array([env.frenet_to_cartesian(s, h) for s, h in
                      zip(rng.uniform(0, env.total_length, 200), rng.uniform(-0.6, 0.6, 200))])
        P = np.vstack([P, rng.uniform(-2, 8, (50, 2))])
        args = (P, env.starts[:-1].copy(), env.tangents.copy(), env.lengths.copy(),
                env.cum_s.copy(), 1e-12)
        a = kernels.project_points_numpy(*args)
        b = kernels.project_points_loops(*args)
        for x, y in zip(a, b):
            assert np.allclose(x, y, atol=1e-9)
