"""Task progression markers and verifier verdicts shared by the loop modules."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Status(str, Enum):
    IN_PROGRESS = "in_progress"
    COMPLETE = "complete"
    STUCK = "stuck"
    TIMED_OUT = "timed_out"
    STEP_LIMIT = "step_limit"
    LOOP_DETECTED = "loop_detected"

    @property
    def terminal(self) -> bool:
        return self is not Status.IN_PROGRESS


class Outcome(str, Enum):
    ADVANCED = "advanced"
    STALLED = "stalled"
    REGRESSED = "regressed"


class Component(str, Enum):
    PLANNING = "planning"
    REASONING = "reasoning"
    ACTION = "action"
    VERIFICATION = "verification"


@dataclass(frozen=True)
class ProgressVerdict:
    outcome: Outcome
    rationale: str = ""
    task_complete: bool = False

    def __post_init__(self):
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if self.task_complete and self.outcome is not Outcome.ADVANCED:
            raise ValueError("a completed task must carry an 'advanced' verdict")

    @property
    def advanced(self) -> bool:
        return self.outcome is Outcome.ADVANCED

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "rationale": self.rationale, "task_complete": self.task_complete}

    @classmethod
    def from_dict(cls, d: dict) -> "ProgressVerdict":
        return cls(Outcome(d["outcome"]), d.get("rationale", ""), bool(d.get("task_complete", False)))


@dataclass(frozen=True)
class TaskState:
    """Progress marker: ``step_index`` counts plan steps verified as done."""

    status: Status = Status.IN_PROGRESS
    step_index: int = 0
    answer: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "status", Status(self.status))
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")
        if (self.status is Status.COMPLETE) != bool(self.answer):
            raise ValueError("answer must be non-empty exactly when status is complete")

    @property
    def terminal(self) -> bool:
        return self.status.terminal

    def successor(self, verdict: ProgressVerdict) -> "TaskState":
        """The state the verifier's verdict implies for the next step."""
        if verdict.outcome is Outcome.ADVANCED:
            return TaskState(Status.IN_PROGRESS, self.step_index + 1)
        if verdict.outcome is Outcome.REGRESSED:
            return TaskState(Status.IN_PROGRESS, max(self.step_index - 1, 0))
        return TaskState(Status.IN_PROGRESS, self.step_index)

    def finish(self, status: Status, answer: str | None = None) -> "TaskState":
        if self.terminal:
            raise ValueError(f"state already terminal ({self.status.value})")
        return TaskState(status, self.step_index, answer if status is Status.COMPLETE else None)

    def to_dict(self) -> dict:
        return {"status": self.status.value, "step_index": self.step_index, "answer": self.answer}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskState":
        return cls(Status(d["status"]), int(d["step_index"]), d.get("answer"))
