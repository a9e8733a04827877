import json
import math

import numpy as np
import pytest

from hpl.dynamics import POS, SystemLimits
from hpl.environment import TubeEnvironment, TubeSegment, generate_tube
from hpl.harness import (BUNDLE_VERSION, EpisodeLog, Execution, ModelBundle, RunConfig,
                         TrainConfig, evaluate, generate_demonstration, recovery_starts,
                         run_hpl, run_safety, train_models, validate_execution)
from hpl.safety import SafeSetSpec

SAFE = SafeSetSpec(0.2, 0.8, 0.6)
TRAIN_TUBES = [(4.0, -0.6), (4.5, -0.2), (5.0, 0.3), (4.2, 0.7), (4.8, 0.0)]


def straight(length, slope):
    return TubeEnvironment((TubeSegment(length, slope),), 1.0)


def kinematic_bound_steps(env, dt=0.01, limits=SystemLimits()):
    """Fewest steps to reach the goal arc length from rest on a straight tube
    with unit acceleration and the per-axis speed box."""
    t = env.tangents[0]
    v_cap = min(limits.v_max[0] / abs(t[0]) if t[0] else math.inf,
                limits.v_max[1] / abs(t[1]) if t[1] else math.inf)
    a = limits.input_norm_max
    s = env.s_goal
    d_acc = v_cap ** 2 / (2 * a)
    if s <= d_acc:
        time = math.sqrt(2 * s / a)
    else:
        time = v_cap / a + (s - d_acc) / v_cap
    return time / dt


@pytest.fixture(scope="module")
def straight_bundle():
    envs, exs = [], []
    for i, (L, m) in enumerate(TRAIN_TUBES):
        env = straight(L, m)
        exs.append(generate_demonstration(env, safe=SAFE))
        envs.append(env)
        for x0 in recovery_starts(env, SAFE, 2, seed=i):
            exs.append(generate_demonstration(env, safe=SAFE, x0=x0))
            envs.append(env)
    return train_models(exs, envs, SAFE, TrainConfig(max_points=400, cv_folds=2))


@pytest.mark.parametrize("slope", [0.0, -0.4, 0.8])
def test_straight_tube_runs_without_safety_mode(straight_bundle, slope):
    env = straight(4.5, slope)
    ex, lg = run_hpl(env, straight_bundle, RunConfig())
    assert lg.completed
    assert lg.safety_steps == 0
    ok, why = validate_execution(ex, env)
    assert ok, why
    _ex_e, lg_e = run_safety(env)
    assert ex.duration < len(lg_e)


def test_reject_everything_runs_on_safety_controller(straight_bundle):
    env = straight(3.0, 0.2)
    ex, lg = run_hpl(env, straight_bundle, RunConfig(d_thresh=np.zeros(4)))
    assert lg.completed
    assert lg.safety_steps == len(lg) == ex.duration
    assert not any(r["accepted"] for r in lg.records)


@pytest.mark.parametrize("L,slope", [(4.0, 0.0), (5.0, 0.5), (6.0, -1.0)])
def test_unconstrained_straight_demo_near_kinematic_bound(L, slope):
    env = straight(L, slope)
    ex = generate_demonstration(env)
    bound = kinematic_bound_steps(env)
    assert bound <= ex.duration <= 1.1 * bound


@pytest.mark.parametrize("seed", [3, 8])
def test_demo_valid_and_faster_than_safety_controller(seed):
    env = generate_tube(seed)
    ex = generate_demonstration(env, safe=SAFE)
    ok, why = validate_execution(ex, env)
    assert ok, why
    _ex, lg = run_safety(env)
    assert lg.completed
    assert ex.duration < len(lg)


def test_demo_deterministic():
    env = generate_tube(5)
    a = generate_demonstration(env, safe=SAFE)
    b = generate_demonstration(env, safe=SAFE)
    assert np.array_equal(a.states, b.states)


def test_stored_demo_revalidates(tmp_path):
    env = generate_tube(2)
    ex = generate_demonstration(env, safe=SAFE)
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in ex.to_records()))
    back = Execution.from_records([json.loads(l) for l in path.read_text().splitlines()], env)
    assert np.array_equal(back.states, ex.states) and np.array_equal(back.inputs, ex.inputs)
    assert validate_execution(back, env)[0]
    tampered = Execution(back.states.copy(), back.inputs.copy(), env)
    tampered.states[5, 0] += 1e-3
    ok, why = validate_execution(tampered, env)
    assert not ok and "dynamics" in why


def test_validate_rejects_incomplete_and_oversized():
    env = straight(3.0, 0.0)
    X = np.zeros((2, 4))
    X[1] = [0.0, 0.01, 0.0, 0.0]
    ok, why = validate_execution(Execution(X, [[1.0, 0.0]], env), env)
    assert not ok and "target" in why
    ok, why = validate_execution(Execution(X, [[1.5, 0.0]], env), env, require_goal=False)
    assert not ok and "norm" in why


def test_execution_shape_checked():
    with pytest.raises(ValueError):
        Execution(np.zeros((3, 4)), np.zeros((3, 2)))


def test_evaluate_empty_and_margins():
    m = evaluate([], [])
    assert m["episodes"] == 0 and m["completions"] == 0 and m["safety_mode_fraction"] == 0.0
    env = generate_tube(4)
    ex, lg = run_safety(env)
    m = evaluate([ex], [lg])
    assert m["completions"] == 1 and m["duration_steps"] == [ex.duration]
    assert m["safety_mode_fraction"] == 1.0
    assert 0.0 <= m["min_tube_margin"] <= 0.5
    assert evaluate([ex], [lg])["min_tube_margin"] == m["min_tube_margin"]


def test_run_deterministic_and_log_round_trip(straight_bundle):
    env = straight(3.0, 0.3)
    ex1, lg1 = run_hpl(env, straight_bundle)
    ex2, lg2 = run_hpl(env, straight_bundle)
    assert np.array_equal(ex1.states, ex2.states)
    lines = lg1.to_jsonl().splitlines()
    assert len(lines) == len(lg1) == ex1.duration
    back = [json.loads(l) for l in lines]
    assert back == json.loads(json.dumps(lg1.records))
    assert EpisodeLog().to_jsonl() == ""


def test_initial_state_outside_safe_set_rejected(straight_bundle):
    env = straight(3.0, 0.0)
    with pytest.raises(ValueError):
        run_hpl(env, straight_bundle, RunConfig(x0=(0.0, 0.0, 0.45, 0.0)))


def test_bundle_json_round_trip(straight_bundle, tmp_path):
    assert np.all(np.isinf(straight_bundle.d_thresh[2:]))
    assert np.all(np.isfinite(straight_bundle.d_thresh[:2]))
    path = tmp_path / "b.json"
    straight_bundle.save(path)
    raw = json.loads(path.read_text())
    assert raw["d_thresh"][2:] == [None, None]
    back = ModelBundle.load(path)
    assert np.array_equal(back.d_thresh, straight_bundle.d_thresh)
    z = np.linspace(-1, 1, 15)
    for a, b in zip(back.models, straight_bundle.models):
        assert np.allclose(a.predict(z)[0], b.predict(z)[0], rtol=0, atol=1e-12)
    raw["version"] = BUNDLE_VERSION + 1
    with pytest.raises(ValueError):
        ModelBundle.from_dict(raw)


def test_heldout_thresholds_exceed_training_sigmas(straight_bundle):
    # sigmas at conditioning points are tiny; held-out ones are not
    m = straight_bundle.models[0]
    _mu, sig = m.predict(m.Z_train[:20])
    assert straight_bundle.d_thresh[0] > np.median(sig)


def test_recovery_starts_in_safe_set():
    env = generate_tube(6)
    X = recovery_starts(env, SAFE, 5, seed=1)
    assert X.shape == (5, 4)
    s, *_ = env.project_many(X[:, POS])
    assert np.all(s <= 0.7 * env.total_length)
    assert all(SAFE.contains(x, env, SystemLimits()) for x in X)
    assert np.array_equal(X, recovery_starts(env, SAFE, 5, seed=1))
    assert recovery_starts(env, SAFE, 0, seed=1).shape == (0, 4)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(threshold_rule="magic")
    with pytest.raises(ValueError):
        TrainConfig(cv_folds=1)
