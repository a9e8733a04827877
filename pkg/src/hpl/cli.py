"""Command-line pipeline: ``hpl gen-tasks|demo|train|run|eval|plot``.

Artifacts are plain files so every stage can be re-run on its own:

* ``gen-tasks`` writes ``<out>/task_XXX.json`` tube files;
* ``demo`` writes ``<out>/<task>.exec.jsonl`` (plus ``.rJ`` recovery runs)
  and ``<out>/summary.json``;
* ``train`` writes ``<out>/bundle.json``;
* ``run`` writes ``<out>/<run_id>/<task>.exec.jsonl``, ``<task>.log.jsonl``
  and ``summary.json``;
* ``eval`` adds ``eval.json`` to a run directory; ``plot`` adds SVG files.
"""
import argparse
import glob
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from .environment import generate_tube, load_tube, reverse_tube, save_tube
from .harness import (DemoFailure, EpisodeLog, Execution, HardFailure, ModelBundle,
                      evaluate, generate_demonstration, recovery_starts, run_hpl, run_safety,
                      train_models, validate_execution)
from .plotting import duration_bar_svg, trajectory_svg

log = logging.getLogger("hpl")


class PipelineError(RuntimeError):
    """A stage cannot run (missing inputs, incompatible artifacts)."""


# ----------------------------------------------------------------- helpers

def _write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def _read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path):
    if not os.path.exists(path):
        raise PipelineError(f"missing {path}; run the previous stage first")
    with open(path) as f:
        return json.load(f)


def task_seed(seed, i):
    """Tube seed of task `i` under the base `seed`."""
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def _task_files(pattern):
    files = sorted(glob.glob(pattern))
    if not files:
        raise PipelineError(f"no task files match {pattern!r}; run `hpl gen-tasks` first")
    return files


def _task_id(path, reverse=False):
    stem = os.path.basename(path)
    if stem.endswith(".json"):
        stem = stem[:-5]
    return stem + ("_rev" if reverse else "")


def _load_task(path, reverse=False):
    env = load_tube(path)
    return reverse_tube(env) if reverse else env


# ---------------------------------------------------------------- commands

def cmd_gen_tasks(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for i in range(args.n):
        env = generate_tube(task_seed(cfg.seed, i), **cfg.tube_kwargs())
        path = os.path.join(args.out, f"task_{i:03d}.json")
        save_tube(env, path)
        paths.append(path)
    print(f"wrote {len(paths)} task file(s) to {args.out}")
    return 0


def cmd_demo(args, cfg):
    files = _task_files(args.tasks)
    os.makedirs(args.out, exist_ok=True)
    safe = cfg.safe_spec()
    dcfg = cfg.demo_config()
    summary = {"kind": "demonstrations", "tasks": {}}
    for path in files:
        tid = _task_id(path, args.reverse)
        env = _load_task(path, args.reverse)
        try:
            main = generate_demonstration(env, dcfg, safe)
        except DemoFailure as err:
            log.warning("task %s: demonstrator failed (%s); task skipped", tid, err)
            continue
        runs = [(f"{tid}.exec.jsonl", main)]
        starts = recovery_starts(env, safe, cfg.demo.n_recovery,
                                 task_seed(cfg.seed, zlib.crc32(tid.encode())))
        for j, x0 in enumerate(starts):
            try:
                runs.append((f"{tid}.r{j}.exec.jsonl", generate_demonstration(env, dcfg, safe, x0)))
            except DemoFailure as err:
                log.warning("task %s: recovery run %d dropped (%s)", tid, j, err)
        for name, ex in runs:
            _write_jsonl(os.path.join(args.out, name), ex.to_records())
        summary["tasks"][tid] = {"tube": os.path.abspath(path), "reverse": bool(args.reverse),
                                 "executions": [n for n, _ in runs],
                                 "duration_steps": int(main.duration)}
        print(f"{tid}: demonstration {main.duration} steps, {len(runs) - 1} recovery run(s)")
    if not summary["tasks"]:
        raise PipelineError("no demonstrations could be generated")
    _write_json(os.path.join(args.out, "summary.json"), summary)
    return 0


def _load_demos(demo_dir, limits):
    summary = _read_json(os.path.join(demo_dir, "summary.json"))
    envs, exs = [], []
    for tid, t in sorted(summary["tasks"].items()):
        env = _load_task(t["tube"], t.get("reverse", False))
        for name in t["executions"]:
            ex = Execution.from_records(_read_jsonl(os.path.join(demo_dir, name)), env)
            ok, why = validate_execution(ex, env, limits=limits)
            if not ok:
                raise PipelineError(f"stored demonstration {name} is invalid: {why}")
            envs.append(env)
            exs.append(ex)
    return envs, exs


def cmd_train(args, cfg):
    demo_dir = args.demos or args.out
    envs, exs = _load_demos(demo_dir, cfg.system_limits())
    bundle = train_models(exs, envs, cfg.safe_spec(), cfg.train_config())
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bundle.json")
    bundle.save(path)
    print(f"trained on {len(exs)} execution(s); thresholds {np.round(bundle.d_thresh, 5)}; "
          f"bundle at {path}")
    return 0


def load_bundle(path, cfg):
    if not os.path.exists(path):
        raise PipelineError(f"missing model bundle {path}; run `hpl train` first")
    with open(path) as f:
        d = json.load(f)
    if d.get("version") != cfg.bundle_version:
        raise PipelineError(f"model bundle version {d.get('version')} does not match the "
                            f"configured version {cfg.bundle_version}; retrain the models")
    bundle = ModelBundle.from_dict(d)
    if bundle.N != cfg.train.N or not np.isclose(bundle.ds, cfg.train.ds):
        raise PipelineError(f"model bundle uses N={bundle.N}, ds={bundle.ds} but the "
                            f"configuration asks for N={cfg.train.N}, ds={cfg.train.ds}")
    return bundle


def _episode(job):
    """One episode (top-level so it can run in a worker process)."""
    path, reverse, controller, bundle_dict, cfg_dict, out_dir = job
    cfg = cfgmod.from_dict(cfg_dict)
    env = _load_task(path, reverse)
    tid = _task_id(path, reverse)
    rcfg = cfg.run_config()
    try:
        if controller == "safety":
            ex, lg = run_safety(env, rcfg)
        else:
            ex, lg = run_hpl(env, ModelBundle.from_dict(bundle_dict), rcfg)
    except HardFailure as err:
        return tid, {"completed": False, "hard_failure": str(err)}
    _write_jsonl(os.path.join(out_dir, f"{tid}.exec.jsonl"), ex.to_records())
    with open(os.path.join(out_dir, f"{tid}.log.jsonl"), "w") as f:
        f.write(lg.to_jsonl())
    m = evaluate([ex], [lg])
    return tid, {"tube": os.path.abspath(path), "reverse": bool(reverse),
                 "completed": bool(lg.completed), "reason": lg.reason,
                 "duration_steps": int(ex.duration), "wall_time": float(lg.wall_time),
                 "safety_mode_fraction": m["safety_mode_fraction"],
                 "min_tube_margin": m["min_tube_margin"]}


def cmd_run(args, cfg):
    files = _task_files(args.tasks)
    bundle_dict = None
    if args.controller == "hpl":
        bundle_path = args.bundle or os.path.join(args.out, "bundle.json")
        bundle_dict = load_bundle(bundle_path, cfg).to_dict()
    run_id = args.run_id or f"{args.controller}-seed{cfg.seed}" + ("-rev" if args.reverse else "")
    out_dir = os.path.join(args.out, run_id)
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(p, args.reverse, args.controller, bundle_dict, cfg.to_dict(), out_dir)
            for p in files]
    workers = args.workers or cfg.run.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_episode, jobs))
    else:
        results = [_episode(j) for j in jobs]
    episodes = dict(results)
    for tid, r in episodes.items():
        status = "completed" if r["completed"] else r.get("hard_failure", r.get("reason", ""))
        print(f"{tid}: {status} in {r.get('duration_steps', '-')} steps")
    summary = {"run_id": run_id, "controller": args.controller, "seed": cfg.seed,
               "episodes": episodes,
               "all_completed": all(r["completed"] for r in episodes.values())}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return 0 if summary["all_completed"] else 1


def _load_run(run_dir):
    summary = _read_json(os.path.join(run_dir, "summary.json"))
    exs, logs, ids = [], [], []
    for tid, r in sorted(summary["episodes"].items()):
        if "hard_failure" in r:
            continue
        env = _load_task(r["tube"], r["reverse"])
        exs.append(Execution.from_records(_read_jsonl(os.path.join(run_dir, f"{tid}.exec.jsonl")),
                                          env))
        lg = EpisodeLog(_read_jsonl(os.path.join(run_dir, f"{tid}.log.jsonl")), r["completed"],
                        r["wall_time"], r.get("reason", ""))
        logs.append(lg)
        ids.append(tid)
    return summary, ids, exs, logs


def cmd_eval(args, cfg):
    run_dir = args.run or args.out
    summary, ids, exs, logs = _load_run(run_dir)
    metrics = evaluate(exs, logs)
    metrics["task_ids"] = ids
    metrics["hard_failures"] = sum(1 for r in summary["episodes"].values()
                                   if "hard_failure" in r)
    if args.baseline:
        rcfg = cfg.run_config()
        base = [int(run_safety(ex.env, rcfg)[0].duration) for ex in exs]
        metrics["baseline_duration_steps"] = base
        metrics["baseline_mean_duration_steps"] = float(np.mean(base)) if base else 0.0
        if base:
            metrics["mean_improvement"] = 1.0 - metrics["mean_duration_steps"] / float(np.mean(base))
    _write_json(os.path.join(run_dir, "eval.json"), metrics)
    print(f"episodes {metrics['episodes']}, completed {metrics['completions']}, "
          f"mean duration {metrics['mean_duration_steps']:.1f} steps")
    if "mean_improvement" in metrics:
        print(f"baseline mean {metrics['baseline_mean_duration_steps']:.1f} steps, "
              f"improvement {100 * metrics['mean_improvement']:.1f}%")
    ok = metrics["completions"] == len(summary["episodes"]) and metrics["hard_failures"] == 0
    return 0 if ok else 1


def cmd_plot(args, cfg):
    run_dir = args.run or args.out
    summary, ids, exs, logs = _load_run(run_dir)
    plot_dir = os.path.join(run_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    p = cfg.plot
    for tid, ex, lg in zip(ids, exs, logs):
        targets = [r.get("new_target") for r in lg.records[::p.target_every]
                   if r.get("new_target")]
        svg = trajectory_svg(ex.env, [ex], [tid], targets, p.width_px, p.height_px,
                             title=f"{tid}: {ex.duration} steps")
        with open(os.path.join(plot_dir, f"{tid}.svg"), "w") as f:
            f.write(svg)
    series = {summary.get("controller", "run"): [ex.duration for ex in exs]}
    ev_path = os.path.join(run_dir, "eval.json")
    if os.path.exists(ev_path):
        ev = _read_json(ev_path)
        if "baseline_duration_steps" in ev:
            series["centerline tracker"] = ev["baseline_duration_steps"]
    with open(os.path.join(plot_dir, "durations.svg"), "w") as f:
        f.write(duration_bar_svg(ids, series, cfg.run.dt, title="episode durations"))
    print(f"wrote {len(ids) + 1} SVG file(s) to {plot_dir}")
    return 0


# -------------------------------------------------------------------- main

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML project configuration")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--reverse", action="store_true", help="traverse tubes backwards")
    common.add_argument("--tasks", default="tasks/*.json", help="glob of task files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hpl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-tasks", parents=[common], help="generate tube task files")
    g.add_argument("--n", type=int, default=20, help="number of tasks")
    g.set_defaults(func=cmd_gen_tasks)
    d = sub.add_parser("demo", parents=[common], help="record demonstrations")
    d.set_defaults(func=cmd_demo)
    t = sub.add_parser("train", parents=[common], help="fit the strategy GPs")
    t.add_argument("--demos", help="demonstration directory (default: --out)")
    t.set_defaults(func=cmd_train)
    r = sub.add_parser("run", parents=[common], help="closed-loop episodes")
    r.add_argument("--bundle", help="model bundle (default: <out>/bundle.json)")
    r.add_argument("--controller", choices=["hpl", "safety"], default="hpl")
    r.add_argument("--run-id", help="name of the run directory")
    r.add_argument("--workers", type=int, help="parallel episodes")
    r.set_defaults(func=cmd_run)
    e = sub.add_parser("eval", parents=[common], help="aggregate a run")
    e.add_argument("--run", help="run directory (default: --out)")
    e.add_argument("--baseline", action="store_true",
                   help="also time the centerline tracker on the same tubes")
    e.set_defaults(func=cmd_eval)
    pl = sub.add_parser("plot", parents=[common], help="SVG figures for a run")
    pl.add_argument("--run", help="run directory (default: --out)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.override(cfgmod.load(args.config), seed=args.seed)
        return args.func(args, cfg)
    except (PipelineError, cfgmod.ConfigKeyError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
