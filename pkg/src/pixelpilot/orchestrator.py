"""The plan, reason, ground, execute, verify loop and its on-disk trajectory log."""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import jsonschema

from . import agents
from .agents import MalformedReasonerOutput, NoStepsFound, Plan, Task
from .browser import EnvConfig, open_session
from .browser.base import BrowserError, Environment, ExecStatus, ExecutionOutcome, Screenshot
from .browser.simulated import PageGraph, in_rect
from .gateway import Backend, ChatRequest, GatewayError, Message, complete
from .grammar import (
    DEFAULT_MODEL_EXTENT,
    POINTER_ACTIONS,
    ActionCommand,
    Finished,
    GrammarError,
    Hotkey,
    Navigate,
    action_points,
    scale_action,
    serialize_action,
)
from .memory import DEFAULT_CAPACITY, DEFAULT_LOOP_THRESHOLD, DEFAULT_LOOP_WINDOW, EpisodicMemory, MemoryEntry
from .resources import read_json, read_text
from .state import Component, Outcome, ProgressVerdict, Status, TaskState

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRAJECTORY_FILE = "trajectory.jsonl"
SCREENSHOT_DIR = "screenshots"
DEFAULT_MAX_STEPS = 40
STUCK = "STUCK"
AGENT_ROLES = ("planner", "reasoner", "grounder", "verifier")


class MissingBackend(ValueError):
    pass


class TrajectoryFormatError(ValueError):
    pass


class IncompleteRecord(ValueError):
    pass


@dataclass(frozen=True)
class Limits:
    max_steps: int = DEFAULT_MAX_STEPS
    loop_window: int = DEFAULT_LOOP_WINDOW
    loop_threshold: int = DEFAULT_LOOP_THRESHOLD
    memory_capacity: int = DEFAULT_CAPACITY
    model_extent: tuple[int, int] = DEFAULT_MODEL_EXTENT

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not self.loop_window >= self.loop_threshold >= 2:
            raise ValueError("need loop_window >= loop_threshold >= 2")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be positive")

    def to_dict(self) -> dict:
        return {
            "max_steps": self.max_steps,
            "loop_window": self.loop_window,
            "loop_threshold": self.loop_threshold,
            "memory_capacity": self.memory_capacity,
            "model_extent": list(self.model_extent),
        }


@dataclass
class TrajectoryRecord:
    task: Task
    plans: list[Plan]
    entries: list[MemoryEntry]
    final_state: TaskState
    wall_seconds: float
    failure_attribution: Component | None = None
    error: str | None = None
    config: dict = field(default_factory=dict)
    screenshots: dict[str, bytes] = field(default_factory=dict, repr=False)
    path: Path | None = None

    @property
    def steps(self) -> int:
        return len(self.entries)

    def screenshot_bytes(self, ref: str) -> bytes | None:
        if ref in self.screenshots:
            return self.screenshots[ref]
        if self.path is not None:
            f = self.path.parent / ref
            if f.is_file():
                return f.read_bytes()
        return None


# -- persistence ------------------------------------------------------------------

def _validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(read_json("trajectory.schema.json"))


class TrajectoryWriter:
    """Appends one JSON line per event so a crash still leaves a readable prefix."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        (self.dir / SCREENSHOT_DIR).mkdir(parents=True, exist_ok=True)
        self.path = self.dir / TRAJECTORY_FILE
        self._fh = self.path.open("w", encoding="utf-8")
        self.started = False

    def _line(self, obj: dict) -> None:
        self._fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
        self._fh.flush()

    def save_screenshot(self, ref: str, data: bytes) -> None:
        f = self.dir / ref
        if not f.exists():
            f.write_bytes(data)

    def header(self, task: Task, config: dict, plan: Plan | None) -> None:
        self.started = True
        self._line({
            "type": "header",
            "schema_version": SCHEMA_VERSION,
            "task": task.to_dict(),
            "config": config,
            "plan": plan.to_dict() if plan else None,
        })

    def step(self, entry: MemoryEntry, revised: Plan | None) -> None:
        self._line({"type": "step", **entry.to_dict(), "plan": revised.to_dict() if revised else None})

    def footer(self, record: TrajectoryRecord) -> None:
        self._line({
            "type": "footer",
            "final_state": record.final_state.to_dict(),
            "wall_seconds": round(record.wall_seconds, 6),
            "steps": record.steps,
            "plan_revisions": len(record.plans) - 1 if record.plans else 0,
            "failure_attribution": record.failure_attribution.value if record.failure_attribution else None,
            "error": record.error,
        })
        self._fh.close()


def load_trajectory(path: str | Path) -> TrajectoryRecord:
    """Read a trajectory log back; truncated or invalid files raise :class:`TrajectoryFormatError`."""
    path = Path(path)
    if path.is_dir():
        path = path / TRAJECTORY_FILE
    try:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as exc:
        raise TrajectoryFormatError(f"cannot read {path}: {exc}") from None
    validator = _validator()
    docs = []
    for n, line in enumerate(lines, 1):
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrajectoryFormatError(f"{path}:{n}: not JSON ({exc.msg})") from None
        error = jsonschema.exceptions.best_match(validator.iter_errors(doc))
        if error is not None:
            raise TrajectoryFormatError(f"{path}:{n}: {error.message}")
        docs.append(doc)
    if not docs or docs[0]["type"] != "header":
        raise TrajectoryFormatError(f"{path}: missing header line")
    if docs[-1]["type"] != "footer":
        raise TrajectoryFormatError(f"{path}: missing footer line (truncated log?)")
    header, footer, steps = docs[0], docs[-1], docs[1:-1]
    if any(d["type"] != "step" for d in steps):
        raise TrajectoryFormatError(f"{path}: header or footer out of place")
    if len(steps) != footer["steps"]:
        raise TrajectoryFormatError(f"{path}: footer counts {footer['steps']} steps, log has {len(steps)}")
    plans = [Plan.from_dict(header["plan"])] if header["plan"] else []
    entries = []
    try:
        for d in steps:
            entries.append(MemoryEntry.from_dict(d))
            if d["plan"]:
                plans.append(Plan.from_dict(d["plan"]))
        final = TaskState.from_dict(footer["final_state"])
    except (ValueError, GrammarError) as exc:
        raise TrajectoryFormatError(f"{path}: {exc}") from None
    attribution = footer["failure_attribution"]
    return TrajectoryRecord(
        task=Task.from_dict(header["task"]),
        plans=plans,
        entries=entries,
        final_state=final,
        wall_seconds=float(footer["wall_seconds"]),
        failure_attribution=Component(attribution) if attribution else None,
        error=footer["error"],
        config=header["config"],
        path=path,
    )


# -- the loop -----------------------------------------------------------------------

_NAVIGATE = re.compile(r"\b(?:navigate|go)\s+to\s+['\"]?((?:https?|file)://[^\s'\"<>]+)", re.IGNORECASE)
_BACK = re.compile(r"^\W*(?:navigate|go)\s+back\b", re.IGNORECASE)


def engine_action(directive: str) -> ActionCommand | None:
    """Directives the browser can carry out without asking the grounder."""
    if _BACK.search(directive):
        return Hotkey(("alt", "left"))
    m = _NAVIGATE.search(directive)
    if m:
        return Navigate(m.group(1).rstrip(".,;:)]}"))
    return None


def _ref(shot: Screenshot) -> str:
    return f"{SCREENSHOT_DIR}/{shot.ref}.png"


class _Stop(Exception):
    def __init__(self, status: Status, component: Component | None = None, error: str | None = None):
        super().__init__(error or status.value)
        self.status = status
        self.component = component
        self.error = error


class _Run:
    """Mutable bookkeeping for one :func:`run_task` call."""

    def __init__(self, task, backends, env, limits, clock, writer):
        self.task = task
        self.backends = backends
        self.env = env
        self.limits = limits
        self.clock = clock
        self.writer = writer
        self.start = clock()
        self.memory = EpisodicMemory(limits.memory_capacity)
        self.entries: list[MemoryEntry] = []
        self.plans: list[Plan] = []
        self.screenshots: dict[str, bytes] = {}
        self.state = TaskState()

    def expired(self) -> bool:
        return self.clock() - self.start >= self.task.deadline_seconds

    def check_deadline(self) -> None:
        if self.expired():
            raise _Stop(Status.TIMED_OUT)

    def call(self, component: Component, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except GatewayError as exc:
            raise _Stop(Status.STUCK, component, f"{type(exc).__name__}: {exc}") from exc

    def capture(self) -> Screenshot:
        try:
            shot = self.env.screenshot()
        except BrowserError as exc:
            raise _Stop(Status.STUCK, Component.ACTION, f"{type(exc).__name__}: {exc}") from exc
        ref = _ref(shot)
        if ref not in self.screenshots:
            self.screenshots[ref] = shot.encoded_bytes
            if self.writer:
                self.writer.save_screenshot(ref, shot.encoded_bytes)
        return shot

    def act(self, action: ActionCommand) -> tuple[ActionCommand, ExecutionOutcome]:
        try:
            if isinstance(action, Navigate):
                return action, self.env.navigate(action.url)
            executed = scale_action(action, self.limits.model_extent, self.env.viewport)
            return executed, self.env.execute(executed)
        except BrowserError as exc:
            raise _Stop(Status.STUCK, Component.ACTION, f"{type(exc).__name__}: {exc}") from exc

    def step(self, plan: Plan) -> Plan:
        """One loop iteration; returns the plan to use next or raises :class:`_Stop`."""
        be = self.backends
        before = self.capture()
        self.check_deadline()
        try:
            turn = self.call(Component.REASONING, agents.reason, plan, self.memory, before, be["reasoner"])
        except MalformedReasonerOutput as exc:
            raise _Stop(Status.STUCK, Component.REASONING, str(exc)) from exc
        if turn.finished:
            self.state = self.state.finish(Status.COMPLETE, turn.final_answer)
            raise _Stop(Status.COMPLETE)

        action = engine_action(turn.directive)
        if action is None:
            self.check_deadline()
            try:
                grounded = self.call(
                    Component.ACTION, agents.ground, turn.directive, before, self.memory.render_history(), be["grounder"]
                )
            except GrammarError as exc:
                raise _Stop(Status.STUCK, Component.ACTION, f"{type(exc).__name__}: {exc}") from exc
            action = grounded.action
            if isinstance(action, Finished) and action.content.strip().upper() == STUCK:
                raise _Stop(Status.STUCK)
        executed, outcome = self.act(action)
        after = self.capture()

        if self.expired():
            verdict = ProgressVerdict(Outcome.STALLED, "deadline reached before verification")
        else:
            verdict = self.call(Component.VERIFICATION, agents.verify, before, after, turn.directive, plan, self.task, be["verifier"])
        entry = MemoryEntry(
            step_index=len(self.entries) + 1,
            action=action,
            delta_summary=verdict.rationale,
            state_before=self.state,
            state_after=self.state.successor(verdict),
            verdict=verdict,
            screenshot_ref_before=_ref(before),
            screenshot_ref_after=_ref(after),
            directive=turn.directive,
            executed=executed,
            outcome=str(outcome),
            url_before=before.url,
            url_after=after.url,
            fingerprint_after=after.fingerprint,
        )
        self.memory.append(entry)
        self.entries.append(entry)

        revised = None
        try:
            if verdict.task_complete:
                self.state = entry.state_after
                self.state = self.state.finish(Status.COMPLETE, self.final_answer(plan, after, verdict))
                raise _Stop(Status.COMPLETE)
            if verdict.advanced:
                self.state = entry.state_after
            if self.memory.detect_loop(self.limits.loop_window, self.limits.loop_threshold):
                raise _Stop(Status.LOOP_DETECTED)
            if not verdict.advanced:
                self.check_deadline()
                new = self.call(Component.PLANNING, agents.update_plan, plan, self.memory, self.task, be["planner"])
                if new is not plan:
                    revised = new
                    self.plans.append(new)
                    plan = new
        finally:
            if self.writer:
                self.writer.step(entry, revised)
        return plan

    def final_answer(self, plan: Plan, shot: Screenshot, verdict: ProgressVerdict) -> str:
        # the verifier saw the goal reached; ask the reasoner once to put the answer into words
        fallback = verdict.rationale.strip() or "task complete"
        if self.expired():
            return fallback
        try:
            turn = agents.reason(plan, self.memory, shot, self.backends["reasoner"], note=agents.finalize_prompt())
        except (GatewayError, MalformedReasonerOutput) as exc:
            logger.info("no final answer from reasoner (%s); using verifier rationale", exc)
            return fallback
        return turn.final_answer if turn.finished else fallback


def _check_backends(backends: Mapping[str, Backend | None]) -> None:
    missing = [r for r in AGENT_ROLES if backends.get(r) is None]
    if missing:
        raise MissingBackend(f"no backend configured for: {', '.join(missing)}")


def run_task(
    task: Task,
    backends: Mapping[str, Backend | None],
    env: Environment | EnvConfig,
    limits: Limits = Limits(),
    *,
    out_dir: str | Path | None = None,
    clock: Callable[[], float] = time.monotonic,
    config: dict | None = None,
) -> TrajectoryRecord:
    """Run ``task`` to a terminal status.

    Failures never escape as exceptions: they end the run with a terminal
    status and, where one component is to blame, an attribution. Only a
    missing backend (a configuration mistake) raises.
    """
    _check_backends(backends)
    snapshot = {"limits": limits.to_dict(), **(config or {})}
    if isinstance(env, EnvConfig):
        snapshot.setdefault("env", env.to_dict())
    writer = TrajectoryWriter(out_dir) if out_dir is not None else None
    run = _Run(task, backends, None, limits, clock, writer)
    owned = isinstance(env, EnvConfig)
    component = error = None
    try:
        try:
            run.env = open_session(env) if owned else env
            if task.start_url and run.env.current_url != task.start_url:
                outcome = run.env.navigate(task.start_url)
                if outcome.status is ExecStatus.ERROR:
                    raise _Stop(Status.STUCK, Component.ACTION, outcome.detail)
            try:
                run.plans.append(run.call(Component.PLANNING, agents.plan, task, backends["planner"]))
            except NoStepsFound as exc:
                raise _Stop(Status.STUCK, Component.PLANNING, str(exc)) from exc
            if writer:
                writer.header(task, snapshot, run.plans[0])
            plan = run.plans[0]
            while True:
                if len(run.entries) >= limits.max_steps:
                    raise _Stop(Status.STEP_LIMIT)
                plan = run.step(plan)
        except _Stop as stop:
            component, error = stop.component, stop.error
            if not run.state.terminal:
                run.state = run.state.finish(stop.status)
        except BrowserError as exc:
            # launch failures and sessions dying outside a step
            component, error = Component.ACTION, f"{type(exc).__name__}: {exc}"
            run.state = run.state.finish(Status.STUCK)
    finally:
        if owned and run.env is not None:
            try:
                run.env.close()
            except BrowserError as exc:
                logger.warning("closing session failed: %s", exc)
    record = TrajectoryRecord(
        task=task,
        plans=run.plans,
        entries=run.entries,
        final_state=run.state,
        wall_seconds=max(clock() - run.start, 0.0),
        failure_attribution=component,
        error=error,
        config=snapshot,
        screenshots=run.screenshots,
        path=writer.path if writer else None,
    )
    if writer:
        if not writer.started:
            writer.header(task, snapshot, run.plans[0] if run.plans else None)
        writer.footer(record)
    return record


# -- failure attribution -------------------------------------------------------------

_QUOTED = re.compile(r"""['"‘“]([^'"’”]{2,})['"’”]""")
_URL = re.compile(r"(?:https?|file)://[^\s'\"<>]+")


def _mentions(text: str) -> tuple[list[str], list[str]]:
    return _QUOTED.findall(text), [u.rstrip(".,;:)]}") for u in _URL.findall(text)]


def _page_vocabulary(graph: PageGraph, page_ids) -> str:
    words = []
    for pid in page_ids:
        page = graph.pages[pid]
        words += [page.title, page.url, *page.text, *page.labels()]
    return "\n".join(words).lower()


def _probe(backend: Backend, question: str, images: list[bytes]) -> bool:
    """True when the probe model answers NO (the component looks at fault)."""
    request = ChatRequest([Message("user", read_text("probe.txt").replace("{question}", question), images)])
    reply = complete(backend, request).text.strip().upper()
    return reply.startswith("NO")


def attribute_failure(
    record: TrajectoryRecord,
    probe_backends: Mapping[str, Backend] | None = None,
    *,
    graph: PageGraph | None = None,
) -> Component:
    """Blame the earliest component whose output contradicts the recorded evidence.

    With a page graph the checks are exact: plan mentions of labels or URLs
    the site cannot reach, directives naming things absent from the page they
    were issued on, and pointer actions landing on nothing. Without one, the
    same three questions go to probe models (keys ``planning``, ``reasoning``,
    ``action``), each shown the relevant screenshot. If nothing is at fault,
    the verifier is, for not noticing the failure.
    """
    if record.final_state.status is Status.COMPLETE:
        raise ValueError("attribution applies to runs that did not complete")
    shots: dict[str, bytes] = {}
    for e in record.entries:
        for ref in (e.screenshot_ref_before, e.screenshot_ref_after):
            data = record.screenshot_bytes(ref) if ref else None
            if data is None:
                raise IncompleteRecord(f"step {e.step_index}: screenshot {ref or '(none)'} is missing")
            shots[ref] = data
    probes = probe_backends or {}

    if record.plans:
        steps = record.plans[0].steps
        if graph is not None:
            vocab = _page_vocabulary(graph, graph.reachable())
            urls = {graph.pages[p].url.rstrip("/") for p in graph.reachable()}
            for step in steps:
                quoted, links = _mentions(step)
                if any(q.lower() not in vocab for q in quoted) or any(u.rstrip("/") not in urls for u in links):
                    return Component.PLANNING
        elif "planning" in probes:
            first = [shots[record.entries[0].screenshot_ref_before]] if record.entries else []
            question = f"TASK: {record.task.instruction}\nPLAN:\n{record.plans[0].numbered()}\nCan this plan be carried out on the site shown?"
            if _probe(probes["planning"], question, first):
                return Component.PLANNING

    for e in record.entries:
        page = graph.page_for(e.url_before) if graph is not None else None
        before = shots[e.screenshot_ref_before]
        if page is not None:
            vocab = _page_vocabulary(graph, [page.page_id])
            quoted, links = _mentions(e.directive)
            if isinstance(e.action, Navigate):
                if graph.page_for(e.action.url) is None:
                    return Component.REASONING
            elif any(q.lower() not in vocab for q in quoted):
                return Component.REASONING
        elif "reasoning" in probes:
            if _probe(probes["reasoning"], f"Is the element named in this instruction visible on the page?\nINSTRUCTION: {e.directive}", [before]):
                return Component.REASONING

        if isinstance(e.action, POINTER_ACTIONS) and e.executed is not None:
            if page is not None:
                (pt,) = action_points(e.executed)
                if not any(in_rect(t.rect, pt.x, pt.y) for t in (*page.hotspots, *page.text_fields)):
                    return Component.ACTION
            elif "action" in probes:
                (pt,) = action_points(e.executed)
                q = f"Does pixel ({pt.x}, {pt.y}) lie on the element this instruction refers to?\nINSTRUCTION: {e.directive}"
                if _probe(probes["action"], q, [before]):
                    return Component.ACTION
            elif e.outcome.startswith(ExecStatus.NO_EFFECT.value):
                return Component.ACTION
    return Component.VERIFICATION


def action_line(entry: MemoryEntry) -> str:
    executed = f" -> {serialize_action(entry.executed)}" if entry.executed is not None and entry.executed != entry.action else ""
    return f"#{entry.step_index} {serialize_action(entry.action)}{executed} [{entry.outcome}] {entry.verdict.outcome.value}: {entry.delta_summary}"
