import math

import numpy as np
import pytest

from hpl.dynamics import LinearModel, make_state, step
from hpl.environment import TubeEnvironment, TubeSegment, generate_tube
from hpl.safety import (SafeSetSpec, SafetyControllerCfg, adversarial_tubes, braking_input,
                        report_json, safety_input, safety_input_many, sample_safe_states,
                        shrink_to_safe, verify_safe_set)

SAFE = SafeSetSpec(0.2, 0.8, 0.6)


def straight(slope=0.0, length=6.0):
    return TubeEnvironment((TubeSegment(length, slope),), 1.0)


def test_equilibrium_on_centerline_at_reference_speed():
    env = straight(0.5)
    t = env.tangents[0]
    p = env.point_at(2.0)
    x = make_state(p[0], 0.5 * t[0], p[1], 0.5 * t[1])
    assert np.linalg.norm(safety_input(x, env)) < 0.05


def test_accelerates_along_tangent_from_rest():
    env = straight(-0.7)
    p = env.point_at(1.0)
    u = safety_input(make_state(p[0], 0, p[1], 0), env)
    assert u @ env.tangents[0] > 0


def test_inputs_always_in_the_norm_ball():
    rng = np.random.default_rng(0)
    env = generate_tube(3)
    X = np.column_stack([rng.uniform(-1, 7, 5000), rng.uniform(-3, 3, 5000),
                         rng.uniform(-3, 5, 5000), rng.uniform(-3, 3, 5000)])
    U = safety_input_many(X, env)
    assert np.all(np.hypot(U[:, 0], U[:, 1]) <= 1.0)


def test_controller_is_deterministic_and_batch_consistent():
    env = generate_tube(4)
    X = sample_safe_states(SAFE, env, 50, np.random.default_rng(1))
    U = safety_input_many(X, env)
    assert np.array_equal(U, safety_input_many(X, env))
    for x, u in zip(X[:10], U[:10]):
        assert np.allclose(safety_input(x, env), u, atol=1e-15)


def test_braking_reaches_standstill_within_bound():
    cfg = SafetyControllerCfg()
    model = LinearModel.double_integrator(cfg.dt)
    x = make_state(0, 0.6, 0, -0.5)
    v0 = math.hypot(0.6, 0.5)
    bound = math.ceil(v0 / (cfg.dt * 1.0)) + 1
    for k in range(bound):
        u = braking_input(x, cfg)
        assert np.linalg.norm(u) <= 1.0
        x = step(model, x, u)
    assert np.linalg.norm(x[[1, 3]]) < 1e-9


def test_standstill_spec_has_no_violations():
    spec = SafeSetSpec(0.0, 0.0, 0.0)
    rep = verify_safe_set(spec, [generate_tube(s) for s in range(3)], 50, 200, seed=1)
    assert rep["violations"] == 0


def test_inflated_spec_fails_on_zigzag_tubes():
    spec = SafeSetSpec(0.5, 3.0, -1.0)
    rep = verify_safe_set(spec, adversarial_tubes(), 300, 300, seed=2)
    assert rep["violations"] > 0


def test_default_spec_is_invariant_on_random_tubes():
    envs = [generate_tube(100 + i) for i in range(5)]
    rep = verify_safe_set(SAFE, envs, 200, 300, seed=3)
    assert rep["violations"] == 0
    assert rep["max_u_seen"] <= 1.0
    assert rep["n_state_steps"] == 5 * 200 * 300
    assert '"violations": 0' in report_json(rep)


def test_sampled_states_are_members():
    env = generate_tube(6)
    X = sample_safe_states(SAFE, env, 500, np.random.default_rng(4))
    assert len(X) == 500
    assert SAFE.contains_many(X, env).all()


def test_shrink_keeps_a_safe_spec_unchanged():
    envs = [generate_tube(7)]
    assert shrink_to_safe(SAFE, envs, n_samples=50, n_steps=100) == SAFE


def test_shrink_result_is_inside_and_verifies_on_fresh_seed():
    envs = adversarial_tubes()
    spec0 = SafeSetSpec(0.5, 3.0, -1.0)
    out = shrink_to_safe(spec0, envs, budget=24, n_samples=150, n_steps=300, seed=0)
    assert out.shrink(spec0)
    assert verify_safe_set(out, envs, 150, 300, seed=99)["violations"] == 0


def test_spec_validation_and_serialization():
    env = generate_tube(1)
    with pytest.raises(ValueError):
        SafeSetSpec(0.8, 0.5, 0.0).validate(env)
    with pytest.raises(ValueError):
        SafeSetSpec(-0.1, 0.5)
    with pytest.raises(ValueError):
        SafeSetSpec(0.1, 0.5, 2.0)
    assert SafeSetSpec.from_dict(SAFE.to_dict()) == SAFE
    with pytest.raises(ValueError):
        SafeSetSpec.from_dict({"h_max": 0.1, "depth": 2})
