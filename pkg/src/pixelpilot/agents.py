"""The four model-backed roles of the agent loop: planner, reasoner, grounder and verifier.

Each role is a pair of functions: one assembles the prompt from bundled
template files, the other turns the reply into a typed value. The network
call in between goes through whatever backend the caller supplies.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .browser.base import Screenshot
from .gateway import Backend, ChatRequest, GatewayError, Message, complete
from .grammar import GrammarError, ModelTurn, parse_model_output
from .memory import EMPTY_HISTORY, EpisodicMemory
from .resources import read_text
from .state import Outcome, ProgressVerdict

logger = logging.getLogger(__name__)

LANGUAGE = "English"
FINISHED = "FINISHED"
DEFAULT_DEADLINE_SECONDS = 600
UNPARSEABLE_VERDICT = "unparseable verifier output"


class NoStepsFound(ValueError):
    pass


class MalformedReasonerOutput(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    id: str
    instruction: str
    start_url: str | None = None
    deadline_seconds: float = DEFAULT_DEADLINE_SECONDS

    def __post_init__(self):
        if not self.instruction or not self.instruction.strip():
            raise ValueError("task instruction must not be empty")
        if self.deadline_seconds < 0:
            raise ValueError("deadline_seconds must be >= 0")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "instruction": self.instruction,
            "start_url": self.start_url,
            "deadline_seconds": self.deadline_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(d["id"], d["instruction"], d.get("start_url"), d.get("deadline_seconds", DEFAULT_DEADLINE_SECONDS))


@dataclass(frozen=True)
class Plan:
    steps: tuple[str, ...]
    revision: int = 0

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a plan needs at least one step")
        if self.revision < 0:
            raise ValueError("revision must be >= 0")

    def numbered(self) -> str:
        return "\n".join(f"{i}. {s}" for i, s in enumerate(self.steps, 1))

    def to_dict(self) -> dict:
        return {"steps": list(self.steps), "revision": self.revision}

    @classmethod
    def from_dict(cls, d: dict) -> "Plan":
        return cls(tuple(d["steps"]), int(d.get("revision", 0)))


@dataclass(frozen=True)
class ReasonerTurn:
    reasoning: str
    directive: str
    finished: bool = False
    final_answer: str | None = None
    raw: str = field(default="", compare=False)

    def __post_init__(self):
        if self.finished and not self.final_answer:
            raise ValueError("a finished turn needs a final answer")


def _fill(template: str, **values: str) -> str:
    # plain replacement: substituted text may itself contain braces
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


# -- prompt assembly --------------------------------------------------------------

def planner_system_prompt() -> str:
    return read_text("planner_system.txt")


def planner_prompt(task: Task) -> str:
    return _fill(read_text("planner_user.txt"), task=task.instruction)


def reasoner_system_prompt() -> str:
    return read_text("reasoner_system.txt")


def reasoner_prompt(plan: Plan, history: str) -> str:
    return _fill(read_text("reasoner_user.txt"), plan=plan.numbered(), history=history)


def grounder_prompt(directive: str, language: str = LANGUAGE) -> str:
    return _fill(read_text("grounder.txt"), language=language, instruction=directive)


def replan_prompt(task: Task, plan: Plan, history: str) -> str:
    return planner_prompt(task) + "\n\n" + _fill(read_text("replan.txt"), plan=plan.numbered(), history=history)


def verifier_prompt(task: Task, plan: Plan, directive: str) -> str:
    return _fill(read_text("verifier_user.txt"), task=task.instruction, plan=plan.numbered(), directive=directive)


# -- reply parsing ----------------------------------------------------------------

_STEP = re.compile(r"<step>(.*?)</step>", re.DOTALL | re.IGNORECASE)
_REASONING = re.compile(r"<reasoning>(.*?)</reasoning>", re.DOTALL | re.IGNORECASE)
_ACTION = re.compile(r"<action>(.*?)</action>", re.DOTALL | re.IGNORECASE)
_OUTCOME = re.compile(r"^\s*OUTCOME\s*:\s*\**\s*(advanced|stalled|regressed)\b", re.IGNORECASE | re.MULTILINE)
_COMPLETE = re.compile(r"^\s*COMPLETE\s*:\s*\**\s*(yes|no|true|false)\b", re.IGNORECASE | re.MULTILINE)
_WHY = re.compile(r"^\s*WHY\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)


def parse_steps(text: str) -> list[str]:
    steps = [s.strip() for s in _STEP.findall(text) if s.strip()]
    if not steps:
        raise NoStepsFound("planner reply contains no <step> tags")
    return steps


def parse_reasoner_output(text: str) -> ReasonerTurn:
    action = _ACTION.search(text)
    if action is None:
        raise MalformedReasonerOutput("reply has no <action> tag")
    directive = action.group(1).strip()
    if not directive:
        raise MalformedReasonerOutput("<action> tag is empty")
    reasoning = _REASONING.search(text)
    reasoning_text = reasoning.group(1).strip() if reasoning else ""
    if directive.startswith(FINISHED):
        answer = directive[len(FINISHED):].lstrip(" \t\n+:-").strip()
        if not answer:
            raise MalformedReasonerOutput("FINISHED without a final response")
        return ReasonerTurn(reasoning_text, directive, True, answer, raw=text)
    return ReasonerTurn(reasoning_text, directive, raw=text)


def parse_verdict(text: str) -> ProgressVerdict:
    """Read the verifier's line-keyed reply; anything unreadable counts as stalled."""
    outcome = _OUTCOME.search(text or "")
    if outcome is None:
        return ProgressVerdict(Outcome.STALLED, UNPARSEABLE_VERDICT)
    verdict = Outcome(outcome.group(1).lower())
    done = _COMPLETE.search(text)
    why = _WHY.search(text)
    task_complete = bool(done) and done.group(1).lower() in ("yes", "true") and verdict is Outcome.ADVANCED
    return ProgressVerdict(verdict, why.group(1).strip() if why else "", task_complete)


# -- roles ------------------------------------------------------------------------

def plan(task: Task, backend: Backend) -> Plan:
    request = ChatRequest([Message("user", planner_prompt(task))], system_prompt=planner_system_prompt())
    return Plan(tuple(parse_steps(complete(backend, request).text)), 0)


def reason(
    plan: Plan,
    memory: EpisodicMemory,
    screenshot: Screenshot,
    backend: Backend,
    *,
    note: str | None = None,
) -> ReasonerTurn:
    """Ask the reasoner for the next natural-language directive.

    A reply without a usable ``<action>`` tag is retried once with the parse
    error attached; a second failure raises :class:`MalformedReasonerOutput`.
    """
    messages = [Message("user", reasoner_prompt(plan, memory.render_history()), [screenshot.encoded_bytes])]
    if note:
        messages.append(Message("user", note))
    request = ChatRequest(messages, system_prompt=reasoner_system_prompt())
    reply = complete(backend, request).text
    try:
        return parse_reasoner_output(reply)
    except MalformedReasonerOutput as exc:
        logger.info("reasoner reply unusable (%s); retrying once", exc)
        retry = ChatRequest(
            messages + [Message("assistant", reply), Message("user", _fill(read_text("reasoner_retry.txt"), error=str(exc)))],
            system_prompt=request.system_prompt,
        )
        return parse_reasoner_output(complete(backend, retry).text)


def ground(
    directive: str,
    screenshot: Screenshot,
    action_history: str,
    backend: Backend,
    *,
    language: str = LANGUAGE,
) -> ModelTurn:
    """Turn a directive into one action in model coordinates.

    ``finished(content='STUCK')`` comes back as an ordinary turn; deciding what
    it means is the caller's business.
    """
    if not directive or not directive.strip():
        raise ValueError("directive must not be empty")
    messages = [Message("user", grounder_prompt(directive, language))]
    if action_history and action_history != EMPTY_HISTORY:
        messages.append(Message("assistant", action_history))
    messages.append(Message("user", "", [screenshot.encoded_bytes]))
    reply = complete(backend, ChatRequest(messages)).text
    try:
        return parse_model_output(reply)
    except GrammarError as exc:
        logger.info("grounder reply unparseable (%s); retrying once", exc)
        retry = messages + [Message("assistant", reply), Message("user", _fill(read_text("grounder_retry.txt"), error=str(exc)))]
        return parse_model_output(complete(backend, ChatRequest(retry)).text)


def verify(
    before: Screenshot,
    after: Screenshot,
    directive: str,
    plan: Plan,
    task: Task,
    backend: Backend,
) -> ProgressVerdict:
    request = ChatRequest(
        [Message("user", verifier_prompt(task, plan, directive), [before.encoded_bytes, after.encoded_bytes])],
        system_prompt=read_text("verifier_system.txt"),
    )
    return parse_verdict(complete(backend, request).text)


def update_plan(plan: Plan, memory: EpisodicMemory, task: Task, backend: Backend) -> Plan:
    """Re-plan after a step that did not advance; keep the old plan if that fails."""
    request = ChatRequest(
        [Message("user", replan_prompt(task, plan, memory.render_history()))],
        system_prompt=planner_system_prompt(),
    )
    try:
        steps = parse_steps(complete(backend, request).text)
    except (NoStepsFound, GatewayError) as exc:
        logger.warning("re-planning failed (%s); keeping revision %d", exc, plan.revision)
        return plan
    return Plan(tuple(steps), plan.revision + 1)


def finalize_prompt() -> str:
    return read_text("finalize.txt")
