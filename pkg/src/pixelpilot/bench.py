"""Benchmark harnesses: single-click grounding accuracy and end-to-end task success."""

from __future__ import annotations

import io
import json
import logging
import math
import re
import string
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping
from urllib.parse import urlparse

from PIL import Image

from .agents import DEFAULT_DEADLINE_SECONDS, Task, grounder_prompt
from .browser import EnvConfig
from .browser.base import Environment
from .gateway import Backend, ChatRequest, GatewayError, Message, complete
from .grammar import (
    DEFAULT_MODEL_EXTENT,
    PIXEL,
    Click,
    DoubleClick,
    GrammarError,
    Point,
    SpaceMismatch,
    action_name,
    parse_model_output,
    scale_point,
)
from .orchestrator import Limits, TrajectoryRecord, run_task
from .resources import read_text
from .state import Status, TaskState

logger = logging.getLogger(__name__)

DEFAULT_CONCURRENCY = 4
CLICK_ACTIONS = (Click, DoubleClick)


class DatasetError(ValueError):
    pass


class JudgeUnavailable(RuntimeError):
    pass


# -- data ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClickSample:
    id: str
    image_ref: str
    instruction: str
    bbox: tuple[int, int, int, int]
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if min(self.bbox) < 0 or x1 > x2 or y1 > y2:
            raise ValueError(f"sample {self.id}: malformed bbox {self.bbox}")
        if self.image_size is not None:
            w, h = self.image_size
            if x2 >= w or y2 >= h:
                raise ValueError(f"sample {self.id}: bbox {self.bbox} exceeds image {w}x{h}")


@dataclass(frozen=True)
class VoyagerTask:
    web_name: str
    task_id: str
    question: str
    start_url: str
    reference_answer: str | None = None

    def __post_init__(self):
        u = urlparse(self.start_url)
        if u.scheme not in ("http", "https", "file") or (u.scheme != "file" and not u.netloc):
            raise ValueError(f"task {self.task_id}: {self.start_url!r} is not a usable URL")


def score_click(sample: ClickSample, predicted: Point) -> bool:
    """Inclusive point-in-box test in the sample image's pixel space."""
    if predicted.space != PIXEL:
        raise SpaceMismatch("score_click expects a pixel-space point")
    x1, y1, x2, y2 = sample.bbox
    return x1 <= predicted.x <= x2 and y1 <= predicted.y <= y2


def _read_records(path: Path) -> list[dict]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            data = json.loads(text)
            return data if isinstance(data, list) else [data]
        return [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None


def showdown_record(raw: dict, n: int) -> dict:
    """Map a record onto the canonical ``{id, image, instruction, bbox}`` form.

    Besides the canonical layout this accepts the published flat layout with
    ``x1, y1, x2, y2`` columns and ``image_path`` / ``prompt`` naming.
    """
    if "bbox" in raw:
        bbox = raw["bbox"]
    else:
        bbox = [raw[k] for k in ("x1", "y1", "x2", "y2")]
    out = {
        "id": str(raw.get("id", raw.get("sample_id", n))),
        "image": raw.get("image") or raw.get("image_path") or raw.get("image_ref"),
        "instruction": raw.get("instruction") or raw.get("prompt"),
        "bbox": [int(round(float(v))) for v in bbox],
    }
    if "width" in raw and "height" in raw:
        out["image_size"] = [int(raw["width"]), int(raw["height"])]
    return out


def load_showdown(path: str | Path) -> list[ClickSample]:
    path = Path(path)
    samples = []
    for n, raw in enumerate(_read_records(path)):
        try:
            rec = showdown_record(raw, n)
            if not rec["image"] or not rec["instruction"]:
                raise KeyError("image/instruction")
            image = Path(rec["image"])
            if not image.is_absolute():
                image = path.parent / image
            size = tuple(rec["image_size"]) if "image_size" in rec else None
            samples.append(ClickSample(rec["id"], str(image), rec["instruction"], tuple(rec["bbox"]), size))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: record {n}: {exc}") from None
    return samples


def load_voyager_tasks(path: str | Path) -> list[VoyagerTask]:
    """Read task records in the public ``{web_name, id, ques, web}`` layout."""
    path = Path(path)
    tasks = []
    for n, raw in enumerate(_read_records(path)):
        try:
            tasks.append(VoyagerTask(
                web_name=raw.get("web_name", ""),
                task_id=str(raw["id"]),
                question=raw["ques"],
                start_url=raw["web"],
                reference_answer=raw.get("answer", raw.get("reference_answer")),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: record {n}: {exc}") from None
    return tasks


# -- reports --------------------------------------------------------------------------

def percentile(values: list[float], pct: float) -> float:
    """Nearest-rank percentile."""
    ordered = sorted(values)
    rank = max(math.ceil(pct / 100 * len(ordered)), 1)
    return ordered[rank - 1]


def latency_stats(values: list[float]) -> dict[str, float]:
    if not values:
        return {"mean": 0.0, "p50": 0.0, "p90": 0.0}
    return {
        "mean": round(sum(values) / len(values), 3),
        "p50": round(percentile(values, 50), 3),
        "p90": round(percentile(values, 90), 3),
    }


def percent(part: int, whole: int) -> float:
    """``100 * part / whole`` rounded half-up to two decimals."""
    if not whole:
        return 0.0
    return float((Decimal(100 * part) / Decimal(whole)).quantize(Decimal("0.01"), ROUND_HALF_UP))


@dataclass
class SampleResult:
    sample_id: str
    predicted: tuple[int, int] | None
    hit: bool
    latency_ms: float
    action: str | None = None
    tag: str | None = None
    error: str | None = None


@dataclass
class BenchReport:
    total: int
    correct: int
    accuracy_percent: float
    latency_ms: dict[str, float]
    per_sample: list[SampleResult]

    @classmethod
    def from_results(cls, results: list[SampleResult]) -> "BenchReport":
        correct = sum(r.hit for r in results)
        return cls(len(results), correct, percent(correct, len(results)), latency_stats([r.latency_ms for r in results]), results)

    @property
    def errors(self) -> list[SampleResult]:
        return [r for r in self.per_sample if r.error]

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, name: str = "grounder") -> str:
        head = ("Model", "Top-1 Accuracy (%)", "Latency (ms)")
        row = (name, f"{self.accuracy_percent:.2f}", f"{self.latency_ms['mean']:.0f}")
        return _table([head, row])


@dataclass
class TaskResult:
    task_id: str
    status: str
    answer: str | None
    judged_correct: bool
    steps: int
    wall_seconds: float
    failure_attribution: str | None = None
    detail: str | None = None
    error: str | None = None


@dataclass
class VoyagerReport:
    total: int
    correct: int
    success_percent: float
    answered: int
    answered_correct: int
    answered_accuracy_percent: float
    status_histogram: dict[str, int]
    attribution_histogram: dict[str, int]
    latency_ms: dict[str, float]
    per_task: list[TaskResult] = field(default_factory=list)

    @classmethod
    def from_results(cls, results: list[TaskResult]) -> "VoyagerReport":
        correct = sum(r.judged_correct for r in results)
        answered = [r for r in results if r.status == Status.COMPLETE.value]
        answered_correct = sum(r.judged_correct for r in answered)
        failed = [r for r in results if not r.judged_correct]
        return cls(
            total=len(results),
            correct=correct,
            success_percent=percent(correct, len(results)),
            answered=len(answered),
            answered_correct=answered_correct,
            answered_accuracy_percent=percent(answered_correct, len(answered)),
            status_histogram=dict(sorted(Counter(r.status for r in results).items())),
            attribution_histogram=dict(sorted(Counter(r.failure_attribution or "unattributed" for r in failed).items())),
            latency_ms=latency_stats([r.wall_seconds * 1000 for r in results]),
            per_task=results,
        )

    @property
    def accuracy_percent(self) -> float:
        return self.success_percent

    @property
    def errors(self) -> list[TaskResult]:
        return [r for r in self.per_task if r.error]

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, name: str = "agent") -> str:
        rows = [("Agent", "Success Rate (%)", "Answered", "Answered Accuracy (%)"),
                (name, f"{self.success_percent:.2f}", f"{self.answered}/{self.total}", f"{self.answered_accuracy_percent:.2f}")]
        lines = [_table(rows), "", _table([("Status", "Tasks"), *((k, str(v)) for k, v in self.status_histogram.items())])]
        if self.attribution_histogram:
            lines += ["", _table([("Failure component", "Tasks"), *((k, str(v)) for k, v in self.attribution_histogram.items())])]
        return "\n".join(lines)


def _table(rows: Iterable[tuple[str, ...]]) -> str:
    rows = list(rows)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(rows[0]), "  ".join("-" * w for w in widths), *map(fmt, rows[1:])])


def _ordered_map(fn, items: list, concurrency: int) -> list:
    if concurrency < 1:
        raise ValueError("concurrency must be positive")
    if concurrency == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(fn, items))


# -- click grounding --------------------------------------------------------------------

def _image(sample: ClickSample, loader: Callable[[str], bytes] | None) -> tuple[bytes, tuple[int, int]]:
    data = loader(sample.image_ref) if loader else Path(sample.image_ref).read_bytes()
    if sample.image_size is not None:
        return data, sample.image_size
    with Image.open(io.BytesIO(data)) as img:
        return data, img.size


def run_showdown(
    samples: list[ClickSample],
    grounder: Backend,
    concurrency: int = DEFAULT_CONCURRENCY,
    *,
    model_extent: tuple[int, int] = DEFAULT_MODEL_EXTENT,
    image_loader: Callable[[str], bytes] | None = None,
) -> BenchReport:
    """Ask the grounder for one action per sample and score click-type answers.

    Any other action, an unparseable reply or a failed call is a miss; the
    first two get a ``tag``, the last an ``error`` note.
    """
    if not samples:
        raise ValueError("no samples to score")

    def one(sample: ClickSample) -> SampleResult:
        latency = 0.0
        try:
            data, size = _image(sample, image_loader)
            request = ChatRequest([Message("user", grounder_prompt(sample.instruction)), Message("user", "", [data])])
            response = complete(grounder, request)
            latency = response.latency_ms
            action = parse_model_output(response.text).action
        except GrammarError as exc:
            return SampleResult(sample.id, None, False, latency, tag=f"unparseable: {exc}")
        except (GatewayError, OSError, ValueError) as exc:
            return SampleResult(sample.id, None, False, latency, error=f"{type(exc).__name__}: {exc}")
        name = action_name(action)
        if not isinstance(action, CLICK_ACTIONS):
            return SampleResult(sample.id, None, False, latency, action=name, tag=f"wrong-action: {name}")
        p = scale_point(action.point, model_extent, size)
        return SampleResult(sample.id, (p.x, p.y), score_click(sample, p), latency, action=name)

    return BenchReport.from_results(_ordered_map(one, samples, concurrency))


# -- end-to-end tasks -------------------------------------------------------------------

def normalize_answer(text: str) -> str:
    text = " ".join(text.lower().split())
    return text.strip(string.punctuation + " ")


@dataclass
class Judge:
    """Decides whether an answer is right: reference match first, then a model."""

    backend: Backend | None = None

    def __call__(self, task: VoyagerTask, answer: str) -> bool:
        return judge_answer(task, answer, self)


def judge_answer(task: VoyagerTask, answer: str, judge: Judge | None) -> bool:
    if not answer or not answer.strip():
        raise ValueError("answer must not be empty")
    if task.reference_answer is not None:
        return normalize_answer(answer) == normalize_answer(task.reference_answer)
    if judge is None or judge.backend is None:
        raise JudgeUnavailable(f"task {task.task_id} has no reference answer and no judge model")
    prompt = read_text("judge.txt").replace("{question}", task.question).replace("{answer}", answer)
    reply = complete(judge.backend, ChatRequest([Message("user", prompt)])).text
    return re.match(r"\W*yes\b", reply, re.IGNORECASE) is not None


@dataclass
class RunSetup:
    """Everything :func:`run_task` needs for one benchmark task."""

    backends: Mapping[str, Backend | None]
    env: Environment | EnvConfig
    limits: Limits = Limits()
    clock: Callable[[], float] = time.monotonic
    out_dir: str | Path | None = None


def run_webvoyager(
    tasks: list[VoyagerTask],
    setup: Callable[[VoyagerTask], RunSetup],
    judge: Judge | None,
    concurrency: int = DEFAULT_CONCURRENCY,
    *,
    deadline_seconds: float = DEFAULT_DEADLINE_SECONDS,
) -> VoyagerReport:
    """Run every task through the agent loop and judge the answers it commits to.

    A task succeeds when the run completes and the judge accepts its answer.
    """
    if not tasks:
        raise ValueError("no tasks to run")

    def one(vt: VoyagerTask) -> TaskResult:
        t0 = time.monotonic()
        try:
            s = setup(vt)
            task = Task(vt.task_id, vt.question, vt.start_url, deadline_seconds)
            record: TrajectoryRecord = run_task(task, s.backends, s.env, s.limits, out_dir=s.out_dir, clock=s.clock)
        except Exception as exc:
            # one broken task must not sink the suite
            logger.exception("task %s crashed", vt.task_id)
            return TaskResult(vt.task_id, Status.STUCK.value, None, False, 0, time.monotonic() - t0, error=f"{type(exc).__name__}: {exc}")
        state: TaskState = record.final_state
        ok, error = False, None
        if state.status is Status.COMPLETE:
            try:
                ok = judge_answer(vt, state.answer, judge)
            except (JudgeUnavailable, GatewayError) as exc:
                error = f"{type(exc).__name__}: {exc}"
        attribution = record.failure_attribution.value if record.failure_attribution else None
        return TaskResult(vt.task_id, state.status.value, state.answer, ok, record.steps, record.wall_seconds, attribution, record.error, error)

    return VoyagerReport.from_results(_ordered_map(one, tasks, concurrency))
