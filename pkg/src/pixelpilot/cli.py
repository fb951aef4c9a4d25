"""Command-line entry point.

Exit codes: 0 success, 1 the agent or benchmark failed, 2 operator error
(bad flags, unreadable config or dataset).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import augment as aug
from . import bench
from .agents import Task
from .browser import load_page_graph
from .browser.base import BadPageGraph
from .config import Config, ConfigError, load_config
from .orchestrator import (
    IncompleteRecord,
    MissingBackend,
    TrajectoryFormatError,
    action_line,
    attribute_failure,
    load_trajectory,
    run_task,
)
from .state import Status

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("pixelpilot")


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _config(path: str | None) -> Config:
    if path is None:
        raise ConfigError("--config is required")
    return load_config(path)


def cmd_run(args) -> int:
    try:
        cfg = _config(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    deadline = cfg.deadline_seconds if args.deadline is None else args.deadline
    try:
        task = Task(args.task_id or time.strftime("task-%Y%m%d-%H%M%S"), args.task, args.url, deadline)
    except ValueError as exc:
        return _fail(str(exc))
    out = Path(args.out) if args.out else cfg.output_dir / task.id
    try:
        record = run_task(task, cfg.backends(), cfg.env, cfg.limits, out_dir=out, config={"config": cfg.snapshot})
    except (MissingBackend, ConfigError, BadPageGraph, OSError) as exc:
        return _fail(str(exc))
    state = record.final_state
    print(f"status: {state.status.value}")
    if state.answer:
        print(f"answer: {state.answer}")
    if record.error:
        print(f"error: {record.error}")
    print(f"steps: {record.steps}  plan revisions: {len(record.plans) - 1 if record.plans else 0}  wall: {record.wall_seconds:.1f}s")
    print(f"trajectory: {record.path}")
    return EXIT_OK if state.status is Status.COMPLETE else EXIT_FAILED


def _write_report(report, path: str | None, name: str) -> None:
    table = report.table(name)
    print(table)
    if path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        p.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")


def cmd_bench(args) -> int:
    try:
        cfg = _config(args.config)
        concurrency = args.concurrency or cfg.concurrency
        if args.suite == "showdown":
            samples = bench.load_showdown(args.dataset)
            if not samples:
                return _fail(f"{args.dataset} holds no samples")
            grounder = cfg.backend("grounder")
            if grounder is None:
                return _fail("the showdown benchmark needs a grounder backend")
            report = bench.run_showdown(samples, grounder, concurrency, model_extent=cfg.limits.model_extent)
            _write_report(report, args.report, cfg.role_backends["grounder"].get("model", "grounder"))
            print(f"Top-1 accuracy: {report.accuracy_percent:.2f}%")
        else:
            tasks = bench.load_voyager_tasks(args.dataset)
            if not tasks:
                return _fail(f"{args.dataset} holds no tasks")

            def setup(vt: bench.VoyagerTask) -> bench.RunSetup:
                out = cfg.output_dir / "webvoyager" / vt.task_id if args.keep_trajectories else None
                return bench.RunSetup(cfg.backends(), cfg.env, cfg.limits, out_dir=out)

            report = bench.run_webvoyager(tasks, setup, bench.Judge(cfg.backend("judge")), concurrency, deadline_seconds=cfg.deadline_seconds)
            _write_report(report, args.report, "agent")
            print(f"Success rate: {report.success_percent:.2f}%  answered accuracy: {report.answered_accuracy_percent:.2f}%")
    except (ConfigError, bench.DatasetError) as exc:
        return _fail(str(exc))
    if report.errors:
        print(f"{len(report.errors)} item(s) reported errors", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_augment(args) -> int:
    try:
        entries = aug.load_annotations(args.input)
        templates = aug.load_templates(args.templates)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail(f"cannot load inputs: {exc}")
    web = aug.filter_web_subset(entries)
    result = aug.augment(web, templates, args.variants, args.seed) if web else aug.AugmentResult([], [])
    try:
        written = aug.emit_training_file(result.samples, args.out)
    except aug.IoFailure as exc:
        return _fail(str(exc))
    print(f"entries in: {len(entries)}")
    print(f"web entries: {len(web)}")
    print(f"samples out: {written}")
    for note in result.notes:
        print(f"skipped {note}")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        record = load_trajectory(args.trajectory)
    except TrajectoryFormatError as exc:
        return _fail(str(exc))
    print(f"task: {record.task.instruction}")
    for p in record.plans:
        print(f"plan revision {p.revision}:")
        for i, step in enumerate(p.steps, 1):
            print(f"  {i}. {step}")
    for e in record.entries:
        print(action_line(e))
    state = record.final_state
    print(f"status: {state.status.value}" + (f"  answer: {state.answer}" if state.answer else ""))
    print(f"steps: {record.steps}")
    if args.step is not None:
        match = [e for e in record.entries if e.step_index == args.step]
        if not match:
            return _fail(f"no step {args.step} (log has {record.steps})")
        base = record.path.parent
        print(f"before: {base / match[0].screenshot_ref_before}")
        print(f"after: {base / match[0].screenshot_ref_after}")
    if args.attribute:
        if state.status is Status.COMPLETE:
            print("attribution: none (run completed)")
            return EXIT_OK
        try:
            graph = _replay_graph(args, record)
            probes = _config(args.config).probe_backends() if args.config else None
            component = attribute_failure(record, probes, graph=graph)
        except (IncompleteRecord, ConfigError, BadPageGraph, OSError) as exc:
            return _fail(str(exc))
        print(f"attribution: {component.value}")
    return EXIT_OK


def _replay_graph(args, record):
    if args.page_graph:
        return load_page_graph(args.page_graph)
    env = record.config.get("env") or {}
    if env.get("kind") == "simulated" and env.get("page_graph"):
        return load_page_graph(env["page_graph"])
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelpilot", description="Screenshot-only web agent.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one task")
    run.add_argument("task", help="what the agent should do")
    run.add_argument("--url", help="page to start from")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="trajectory directory (default: <output_dir>/<task id>)")
    run.add_argument("--task-id")
    run.add_argument("--deadline", type=float, help="seconds; overrides the config")
    run.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a benchmark")
    b.add_argument("suite", choices=("showdown", "webvoyager"))
    b.add_argument("--dataset", required=True)
    b.add_argument("--config", required=True)
    b.add_argument("--report", help="JSON report path; a .txt table is written next to it")
    b.add_argument("--concurrency", type=int)
    b.add_argument("--keep-trajectories", action="store_true", help="webvoyager: save every task's trajectory")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("augment", help="generate instruction training data")
    a.add_argument("--in", dest="input", required=True, help="annotation file (JSON or JSONL)")
    a.add_argument("--templates", help="template file (default: bundled templates)")
    a.add_argument("--variants", type=int, default=3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    r = sub.add_parser("replay", help="inspect a saved trajectory")
    r.add_argument("--trajectory", required=True, help="trajectory.jsonl or its directory")
    r.add_argument("--step", type=int)
    r.add_argument("--attribute", action="store_true", help="name the component most likely at fault")
    r.add_argument("--page-graph", help="page graph for exact attribution checks")
    r.add_argument("--config", help="config whose 'probes' section supplies probe models")
    r.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "variants", 1) < 1 or (getattr(args, "concurrency", None) or 1) < 1:
        return _fail("counts must be positive")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
