"""End-to-end acceptance checks, one test per criterion.

Each test times itself against its budget. A one-line pass/fail summary per
criterion is printed at the end of the session (see conftest.py).
"""

import json
import random
import threading
import time
from pathlib import Path

import jsonschema
import pytest

from pixelpilot.agents import (
    grounder_prompt,
    planner_prompt,
    planner_system_prompt,
    reasoner_prompt,
    reasoner_system_prompt,
)
from pixelpilot.augment import augment, emit_training_file, load_templates
from pixelpilot.bench import ClickSample, run_showdown, score_click
from pixelpilot.bench import Judge, run_webvoyager
from pixelpilot.browser import EnvConfig
from pixelpilot.browser.cdp import find_chrome
from pixelpilot.gateway import ScriptedBackend
from pixelpilot.grammar import (
    DIRECTIONS,
    Click,
    DoubleClick,
    Drag,
    Finished,
    GrammarError,
    Hotkey,
    Point,
    RightClick,
    Scroll,
    Type,
    Wait,
    action_name,
    parse_action,
    parse_model_output,
    serialize_action,
)
from pixelpilot.memory import EpisodicMemory, MemoryEntry
from pixelpilot.orchestrator import Limits, Task, load_trajectory, run_task
from pixelpilot.resources import read_json
from pixelpilot.state import Outcome, ProgressVerdict, Status, TaskState
from scenarios import (
    ADVERSARIES,
    CLICK_BACK_STEPS,
    REMINDER_OUTPUTS,
    SHOP_TASK,
    SHOP_TRACE,
    SHOWDOWN_SIZE,
    VOYAGER_TIMEOUTS,
    act,
    adversarial_case,
    click,
    click_back_backends,
    model_to_pixel,
    random_annotations,
    reminder_entry,
    shop_backends,
    shop_env,
    showdown_oracle,
    showdown_samples,
    steps,
    verdict,
    voyager_suite,
)
from test_agents import DIRECTIVE, HISTORY, PLAN, TASK, fixture_memory

GOLDEN = Path(__file__).parent / "golden"


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"


# -- 1: action grammar ------------------------------------------------------------------

_KEY_POOL = [c for c in map(chr, range(33, 0x250)) if c == c.lower() and not c.isspace() and c.isprintable()]
_TEXT_POOL = "abcxyz XYZ019 '\"\\\n\t\r()=,<>/point{}é漢😀"


def _rand_point(rng):
    return Point(rng.randint(0, 1000), rng.randint(0, 1000))


def _rand_text(rng, n=40):
    return "".join(rng.choice(_TEXT_POOL) for _ in range(rng.randint(0, n)))


def _rand_key(rng):
    return "".join(rng.choice(_KEY_POOL) for _ in range(rng.randint(1, 6)))


_MAKERS = [
    lambda r: Click(_rand_point(r)),
    lambda r: DoubleClick(_rand_point(r)),
    lambda r: RightClick(_rand_point(r)),
    lambda r: Drag(_rand_point(r), _rand_point(r)),
    lambda r: Hotkey(tuple(_rand_key(r) for _ in range(r.randint(1, 3)))),
    lambda r: Type(_rand_text(r)),
    lambda r: Scroll(_rand_point(r), r.choice(DIRECTIONS)),
    lambda r: Wait(),
    lambda r: Finished(_rand_text(r)),
]


def _mutate(rng, text):
    chars = list(text)
    for _ in range(rng.randint(1, 4)):
        op = rng.randrange(3)
        i = rng.randrange(len(chars) + 1)
        if op == 0 and chars:
            del chars[min(i, len(chars) - 1)]
        elif op == 1:
            chars.insert(i, rng.choice(_TEXT_POOL))
        elif chars:
            j = rng.randrange(len(chars))
            chars[min(i, len(chars) - 1)], chars[j] = chars[j], chars[min(i, len(chars) - 1)]
    return "".join(chars)


@pytest.mark.criterion(1, "action grammar round-trip and fuzz", 10)
def test_grammar_round_trip_and_fuzz():
    rng = random.Random(20240601)
    with Budget(10):
        seen = set()
        corpus = []
        for _ in range(10_000):
            action = rng.choice(_MAKERS)(rng)
            text = serialize_action(action)
            assert parse_action(text) == action, text
            seen.add(action_name(action))
            corpus.append(text)
        assert len(seen) == 9

        for n in range(10_000):
            if n % 3 == 0:
                junk = _rand_text(rng, 80)
            else:
                junk = _mutate(rng, rng.choice(corpus))
            for parser, text in ((parse_action, junk), (parse_model_output, "Action: " + junk)):
                try:
                    parser(text)
                except GrammarError:
                    pass


# -- 2: deterministic shop scenario ------------------------------------------------------

@pytest.mark.criterion(2, "scripted shop scenario trace", 5)
def test_shop_scenario(tmp_path):
    with Budget(5):
        record = run_task(SHOP_TASK, shop_backends(), shop_env(), out_dir=tmp_path)
        assert record.final_state.status is Status.COMPLETE
        assert record.steps == 5
        assert [(e.action, e.verdict.outcome, e.state_before, e.state_after) for e in record.entries] == SHOP_TRACE
        lines = [json.loads(ln) for ln in (tmp_path / "trajectory.jsonl").read_text().splitlines()]
        step_lines = [ln for ln in lines if ln["type"] == "step"]
        assert len(step_lines) == 5
        for ln in step_lines:
            if ln["plan"]:
                assert ln["verdict"]["outcome"] != "advanced"
        assert [p.revision for p in record.plans] == [0, 1]


# -- 3: guards ---------------------------------------------------------------------------

def _run_bounded(case, seconds=10):
    task, backends, clock, max_steps, _ = case
    kw = {"clock": clock} if clock else {}
    box = {}

    def go():
        box["record"] = run_task(task, backends, shop_env(), Limits(max_steps=max_steps), **kw)

    t = threading.Thread(target=go, daemon=True)
    t.start()
    t.join(seconds)
    assert not t.is_alive(), f"{task.task_id} did not terminate"
    return box["record"]


@pytest.mark.criterion(3, "adversarial runs terminate", 60)
def test_adversarial_runs_terminate():
    rng = random.Random(31337)
    with Budget(60):
        for _ in range(100):
            kind = rng.choice(ADVERSARIES)
            case = adversarial_case(kind, rng)
            expect, max_steps = case[4], case[3]
            record = _run_bounded(case)
            assert record.final_state.terminal
            assert record.steps <= max_steps
            if expect is None:
                assert record.final_state.status in (Status.TIMED_OUT, Status.STEP_LIMIT)
            else:
                assert record.final_state.status is expect, kind

        loop = run_task(Task("loop", "find the mug", "https://shop.test/"), click_back_backends(), shop_env())
        assert loop.final_state.status is Status.LOOP_DETECTED
        assert loop.steps == CLICK_BACK_STEPS <= 8


# -- 4: click scoring and the 557-sample fixture ------------------------------------------

@pytest.mark.criterion(4, "click scoring and grounding accuracy", 30)
def test_click_scoring():
    rng = random.Random(4242)
    with Budget(30):
        for _ in range(10_000):
            x1, y1 = rng.randint(0, 60), rng.randint(0, 60)
            x2, y2 = x1 + rng.randint(0, 20), y1 + rng.randint(0, 20)
            raster = [[False] * 100 for _ in range(100)]
            for j in range(y1, y2 + 1):
                for i in range(x1, x2 + 1):
                    raster[j][i] = True
            if rng.random() < 0.5:
                x = rng.choice([x1 - 1, x1, x2, x2 + 1])
                y = rng.choice([y1 - 1, y1, y2, y2 + 1])
            else:
                x, y = rng.randint(0, 99), rng.randint(0, 99)
            x, y = max(0, x), max(0, y)
            s = ClickSample("a", "a.png", "x", (x1, y1, x2, y2), (100, 100))
            assert score_click(s, Point(x, y, "pixel")) is raster[y][x], (s.bbox, x, y)

        samples = showdown_samples()
        assert len(samples) == SHOWDOWN_SIZE
        ids = [s.id for s in samples]
        full = run_showdown(samples, showdown_oracle(samples, set(ids)), 8, image_loader=lambda ref: None)
        assert full.accuracy_percent == 100.00
        half = run_showdown(samples, showdown_oracle(samples, set(ids[:279])), 8, image_loader=lambda ref: None)
        assert (half.correct, half.accuracy_percent) == (279, 50.09)


# -- 5: task-suite arithmetic -------------------------------------------------------------

@pytest.mark.criterion(5, "task suite success arithmetic", 120)
def test_voyager_arithmetic():
    with Budget(120):
        tasks, setup = voyager_suite()
        report = run_webvoyager(tasks, setup, Judge(), concurrency=4)
        assert report.success_percent == 68.00
        assert report.answered == 35
        assert report.answered_accuracy_percent == 97.14
        assert report.status_histogram.get("timed_out") == VOYAGER_TIMEOUTS


# -- 6: instruction augmentation -----------------------------------------------------------

@pytest.mark.criterion(6, "instruction augmentation", 5)
def test_augmentation(tmp_path):
    templates = load_templates()
    failures = []
    with Budget(5):
        produced = [s.instruction for s in augment([reminder_entry()], templates, 3, 0)]
        for want in REMINDER_OUTPUTS:
            if want not in produced:
                failures.append(f"missing instruction {want!r}; produced {produced}")

        entries = random_annotations(1000, seed=99)
        by_id = {e.id: e for e in entries}
        for s in augment(entries, templates, 3, 5):
            e = by_id[s.source_annotation_id]
            p = parse_action(s.target_action).point
            x, y = model_to_pixel(p.x, p.y, e.image_size)
            x1, y1, x2, y2 = e.bbox
            if not (x1 <= x <= x2 and y1 <= y <= y2):
                failures.append(f"target {(x, y)} outside {e.bbox} for {e.id}")

        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        emit_training_file(augment(entries, templates, 3, 17).samples, a)
        emit_training_file(augment(entries, templates, 3, 17).samples, b)
        if a.read_bytes() != b.read_bytes():
            failures.append("seeded output files differ")
    assert not failures, "\n".join(failures)


# -- 7: prompt assembly --------------------------------------------------------------------

@pytest.mark.criterion(7, "prompt assembly matches golden files", 1)
def test_prompt_goldens():
    with Budget(1):
        assert fixture_memory().render_history() == HISTORY
        built = {
            "planner_system.txt": planner_system_prompt(),
            "planner_user.txt": planner_prompt(TASK),
            "reasoner_system.txt": reasoner_system_prompt(),
            "reasoner_user.txt": reasoner_prompt(PLAN, fixture_memory().render_history()),
            "grounder.txt": grounder_prompt(DIRECTIVE),
        }
        for name, text in built.items():
            assert text.encode("utf-8") == (GOLDEN / name).read_bytes(), name


# -- 8: memory properties ---------------------------------------------------------------------

_ACTIONS = [Click(Point(1, 1)), Click(Point(2, 2)), Scroll(Point(5, 5), "down"), Wait(), Hotkey(("alt", "left"))]
_FPS = ["a", "b", "c"]


def _random_memory(rng):
    mem = EpisodicMemory(capacity=rng.randint(1, 12))
    state = TaskState()
    seq = []
    for i in range(1, rng.randint(1, 30) + 1):
        outcome = rng.choice(list(Outcome))
        v = ProgressVerdict(outcome, f"r{i}")
        nxt = state.successor(v)
        entry = MemoryEntry(i, rng.choice(_ACTIONS), f"d{i}", state, nxt, v, fingerprint_after=rng.choice(_FPS))
        if outcome is Outcome.ADVANCED:
            state = nxt
        seq.append(entry)
    return mem, seq


@pytest.mark.criterion(8, "memory capacity, rendering and loop detection", 10)
def test_memory_properties():
    rng = random.Random(8080)
    with Budget(10):
        for _ in range(10_000):
            mem, seq = _random_memory(rng)
            twin = EpisodicMemory(capacity=mem.capacity)
            for e in seq:
                mem.append(e)
                twin.append(e)
                assert len(mem) <= mem.capacity
                assert mem.entries[-1] is e
            assert mem.render_history() == twin.render_history()
            window = rng.randint(2, 10)
            hits = [mem.detect_loop(window, t) for t in range(2, window + 1)]
            # once a threshold is not met, no higher threshold is
            assert hits == sorted(hits, reverse=True)
            if window < 10:
                assert not hits[-1] or mem.detect_loop(window + 1, window)


# -- 9: real browser ----------------------------------------------------------------------------

@pytest.mark.browser
@pytest.mark.criterion(9, "headless browser click and trajectory log", 30)
def test_browser_click(tmp_path, site_url):
    assert find_chrome() is not None, "Chromium is required for this criterion"
    # the Go button covers pixels (100..300, 100..180); (156, 175) model is (200, 140) px at 1280x800
    backends = {
        "planner": ScriptedBackend([steps("Click the 'Go' button", "Report the page")]),
        "reasoner": ScriptedBackend([act("Click the 'Go' button"), act("FINISHED next page")]),
        "grounder": ScriptedBackend([click((156, 175))]),
        "verifier": ScriptedBackend([verdict("advanced", why="next page shown")]),
    }
    with Budget(30):
        record = run_task(
            Task("go", "Open the next page", site_url + "/index.html", 60),
            backends,
            EnvConfig(kind="browser", viewport=(1280, 800), wait_seconds=0.2, settle_timeout=5),
            out_dir=tmp_path,
        )
        assert record.final_state.status is Status.COMPLETE
        (entry,) = record.entries
        assert entry.executed == Click(Point(200, 140, "pixel"))
        assert entry.url_before.endswith("/index.html")
        assert entry.url_after.endswith("/next.html")
        assert entry.fingerprint_after != ""
        assert (tmp_path / entry.screenshot_ref_after).is_file()

        validator = jsonschema.Draft202012Validator(read_json("trajectory.schema.json"))
        for line in (tmp_path / "trajectory.jsonl").read_text().splitlines():
            validator.validate(json.loads(line))
        assert load_trajectory(tmp_path).entries == record.entries
