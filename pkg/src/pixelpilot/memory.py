"""Bounded short-term memory of (action, visual change, state before, state after) tuples."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, fields, replace

from .grammar import PIXEL, ActionCommand, Point, parse_action, serialize_action
from .state import Outcome, ProgressVerdict, TaskState

DEFAULT_CAPACITY = 20
DEFAULT_LOOP_WINDOW = 8
DEFAULT_LOOP_THRESHOLD = 3
EMPTY_HISTORY = "(no prior actions)"


class OutOfOrderEntry(ValueError):
    pass


def _pixel_action(text: str) -> ActionCommand:
    # the text form carries no coordinate space; executed actions are always pixels
    action = parse_action(text, allow_engine=True)
    changes = {f.name: Point(v.x, v.y, PIXEL) for f in fields(action) if isinstance(v := getattr(action, f.name), Point)}
    return replace(action, **changes) if changes else action


@dataclass(frozen=True)
class MemoryEntry:
    step_index: int
    action: ActionCommand
    delta_summary: str
    state_before: TaskState
    state_after: TaskState
    verdict: ProgressVerdict
    screenshot_ref_before: str = ""
    screenshot_ref_after: str = ""
    # observation context kept for loop detection and failure replay
    directive: str = ""
    executed: ActionCommand | None = None
    outcome: str = "ok"
    url_before: str = ""
    url_after: str = ""
    fingerprint_after: str = ""

    def __post_init__(self):
        if self.verdict.outcome is Outcome.ADVANCED and self.state_after.step_index != self.state_before.step_index + 1:
            raise ValueError("an advanced entry must move the state forward by exactly one step")

    def render(self) -> str:
        delta = " ".join(self.delta_summary.split())
        return f"#{self.step_index} {serialize_action(self.action)} → {self.verdict.outcome.value}: {delta}"

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "action": serialize_action(self.action),
            "executed": serialize_action(self.executed) if self.executed is not None else None,
            "directive": self.directive,
            "outcome": self.outcome,
            "delta_summary": self.delta_summary,
            "verdict": self.verdict.to_dict(),
            "state_before": self.state_before.to_dict(),
            "state_after": self.state_after.to_dict(),
            "screenshot_before": self.screenshot_ref_before,
            "screenshot_after": self.screenshot_ref_after,
            "url_before": self.url_before,
            "url_after": self.url_after,
            "fingerprint_after": self.fingerprint_after,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryEntry":
        executed = d.get("executed")
        return cls(
            step_index=int(d["step_index"]),
            action=parse_action(d["action"], allow_engine=True),
            delta_summary=d.get("delta_summary", ""),
            state_before=TaskState.from_dict(d["state_before"]),
            state_after=TaskState.from_dict(d["state_after"]),
            verdict=ProgressVerdict.from_dict(d["verdict"]),
            screenshot_ref_before=d.get("screenshot_before", ""),
            screenshot_ref_after=d.get("screenshot_after", ""),
            directive=d.get("directive", ""),
            executed=_pixel_action(executed) if executed else None,
            outcome=d.get("outcome", "ok"),
            url_before=d.get("url_before", ""),
            url_after=d.get("url_after", ""),
            fingerprint_after=d.get("fingerprint_after", ""),
        )


@dataclass
class EpisodicMemory:
    """Chronological buffer holding at most ``capacity`` entries.

    When full, the oldest entry whose verdict was not ``advanced`` is dropped
    first; if every stored entry advanced the task, the oldest one goes. The
    entry being appended is never the one evicted.
    """

    capacity: int = DEFAULT_CAPACITY
    entries: list[MemoryEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: MemoryEntry) -> None:
        if self.entries and entry.step_index <= self.entries[-1].step_index:
            raise OutOfOrderEntry(
                f"step {entry.step_index} does not follow stored step {self.entries[-1].step_index}"
            )
        if len(self.entries) >= self.capacity:
            victim = next(
                (i for i, e in enumerate(self.entries) if e.verdict.outcome is not Outcome.ADVANCED),
                0,
            )
            del self.entries[victim]
        self.entries.append(entry)

    def render_history(self, max_entries: int | None = None) -> str:
        if max_entries is not None and max_entries < 0:
            raise ValueError("max_entries must be >= 0")
        if max_entries is None:
            shown = self.entries
        else:
            shown = self.entries[-max_entries:] if max_entries else []
        if not shown:
            return EMPTY_HISTORY
        return "\n".join(e.render() for e in shown)

    def detect_loop(self, window: int = DEFAULT_LOOP_WINDOW, threshold: int = DEFAULT_LOOP_THRESHOLD) -> bool:
        """True when some (action, resulting state) pair repeats ``threshold`` times in the last ``window`` entries."""
        if not window >= threshold >= 2:
            raise ValueError("need window >= threshold >= 2")
        recent = self.entries[-window:]
        counts = Counter((serialize_action(e.action), e.fingerprint_after) for e in recent)
        return any(n >= threshold for n in counts.values())
