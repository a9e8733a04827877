import json
import os

import pytest

from hpl import cli
from hpl.environment import load_tube

FAST = """seed = 1
[tubes]
n_segments = 2
[demo]
n_recovery = 1
[train]
max_points = 200
cv_folds = 2
"""


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST)
    return str(p)


def _gen(out, n, seed=0):
    return cli.main(["gen-tasks", "--out", str(out), "--n", str(n), "--seed", str(seed)])


def test_gen_tasks_deterministic_and_loadable(tmp_path):
    assert _gen(tmp_path / "a", 3) == 0
    assert _gen(tmp_path / "b", 3) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["task_000.json", "task_001.json", "task_002.json"]
    for n in names:
        assert (tmp_path / "a" / n).read_text() == (tmp_path / "b" / n).read_text()
        env = load_tube(str(tmp_path / "a" / n))
        assert env.total_length > 0
    _gen(tmp_path / "c", 3, seed=1)
    assert (tmp_path / "c" / names[0]).read_text() != (tmp_path / "a" / names[0]).read_text()


def test_gen_tasks_zero(tmp_path):
    assert _gen(tmp_path / "z", 0) == 0
    assert os.listdir(tmp_path / "z") == []


def test_missing_inputs_exit_2(tmp_path):
    tasks = str(tmp_path / "none" / "*.json")
    assert cli.main(["demo", "--out", str(tmp_path), "--tasks", tasks]) == 2
    _gen(tmp_path / "t", 1)
    assert cli.main(["run", "--out", str(tmp_path), "--tasks",
                     str(tmp_path / "t" / "*.json")]) == 2


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[train]\nT_horizon = 3\n")
    assert cli.main(["gen-tasks", "--config", str(p), "--out", str(tmp_path), "--n", "1"]) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "fast.toml"
    cfg.write_text(FAST)
    tasks = root / "tasks"
    common = ["--config", str(cfg), "--tasks", str(tasks / "*.json")]
    assert cli.main(["gen-tasks", "--config", str(cfg), "--out", str(tasks), "--n", "3"]) == 0
    assert cli.main(["demo", *common, "--out", str(root / "demos")]) == 0
    assert cli.main(["train", *common, "--demos", str(root / "demos"),
                     "--out", str(root)]) == 0
    rc = cli.main(["run", *common, "--out", str(root), "--run-id", "r"])
    return root, common, rc


def test_pipeline_runs_and_evaluates(pipeline):
    root, common, rc = pipeline
    assert rc == 0
    summary = json.loads((root / "r" / "summary.json").read_text())
    assert summary["all_completed"] and len(summary["episodes"]) == 3
    assert cli.main(["eval", *common, "--run", str(root / "r"), "--baseline"]) == 0
    ev = json.loads((root / "r" / "eval.json").read_text())
    assert ev["completions"] == 3 and ev["hard_failures"] == 0
    assert "mean_improvement" in ev
    assert cli.main(["plot", *common, "--run", str(root / "r")]) == 0
    svg = (root / "r" / "plots" / "task_000.svg").read_text()
    assert svg.count('class="episode"') == 1
    assert (root / "r" / "plots" / "durations.svg").exists()


def test_reverse_run(pipeline):
    root, common, _ = pipeline
    assert cli.main(["run", *common, "--out", str(root), "--reverse",
                     "--controller", "safety"]) == 0
    summary = json.loads((root / "safety-seed1-rev" / "summary.json").read_text())
    assert set(summary["episodes"]) == {"task_000_rev", "task_001_rev", "task_002_rev"}


def test_bundle_version_mismatch_refused(pipeline, tmp_path):
    root, common, _ = pipeline
    d = json.loads((root / "bundle.json").read_text())
    d["version"] += 1
    bad = tmp_path / "bundle.json"
    bad.write_text(json.dumps(d))
    assert cli.main(["run", *common, "--out", str(tmp_path), "--bundle", str(bad)]) == 2


def test_bundle_horizon_mismatch_refused(pipeline, tmp_path):
    root, _common, _ = pipeline
    cfg = tmp_path / "n.toml"
    cfg.write_text(FAST + "N = 5\n")
    assert cli.main(["run", "--config", str(cfg), "--tasks", str(root / "tasks" / "*.json"),
                     "--out", str(tmp_path), "--bundle", str(root / "bundle.json")]) == 2
