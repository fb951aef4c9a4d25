"""Parser and serializer for the action language spoken by the grounding model.

A model reply looks like::

    Thought: the search box is at the top of the page
    Action: click(point='<point>200 300</point>')

Points travel in *model space* (a fixed 0..1000 grid by default) and are
converted to pixels with :func:`scale_point` right before they reach the
browser. :func:`serialize_action` produces the canonical text used in
trajectory logs; ``parse_action(serialize_action(a)) == a`` for every valid
command.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from typing import Union

MODEL = "model"
PIXEL = "pixel"

DIRECTIONS = ("up", "down", "left", "right")
MAX_HOTKEYS = 3
DEFAULT_MODEL_EXTENT = (1000, 1000)


class GrammarError(ValueError):
    """Base class for every parse failure in the action language."""


class MalformedOutput(GrammarError):
    pass


class UnknownAction(GrammarError):
    pass


class BadArguments(GrammarError):
    pass


class TooManyHotkeys(BadArguments):
    pass


class BadDirection(BadArguments):
    pass


class NonPositiveExtent(ValueError):
    pass


class SpaceMismatch(ValueError):
    """A point in the wrong coordinate space was handed to a consumer."""


@dataclass(frozen=True)
class Point:
    x: int
    y: int
    space: str = MODEL

    def __post_init__(self):
        if isinstance(self.x, bool) or isinstance(self.y, bool):
            raise BadArguments("point coordinates must be integers")
        if not isinstance(self.x, int) or not isinstance(self.y, int):
            raise BadArguments(f"point coordinates must be integers, got {self.x!r}, {self.y!r}")
        if self.x < 0 or self.y < 0:
            raise BadArguments(f"negative point ({self.x}, {self.y})")
        if self.space not in (MODEL, PIXEL):
            raise ValueError(f"unknown coordinate space {self.space!r}")


@dataclass(frozen=True)
class Click:
    point: Point


@dataclass(frozen=True)
class DoubleClick:
    point: Point


@dataclass(frozen=True)
class RightClick:
    point: Point


@dataclass(frozen=True)
class Drag:
    start: Point
    end: Point


@dataclass(frozen=True)
class Hotkey:
    keys: tuple[str, ...]

    def __post_init__(self):
        keys = tuple(self.keys)
        object.__setattr__(self, "keys", keys)
        if not keys:
            raise BadArguments("hotkey needs at least one key")
        if len(keys) > MAX_HOTKEYS:
            raise TooManyHotkeys(f"hotkey uses {len(keys)} keys; at most {MAX_HOTKEYS} allowed")
        for key in keys:
            if not isinstance(key, str) or not key or key != key.lower() or any(c.isspace() for c in key):
                raise BadArguments(f"invalid hotkey name {key!r}")


@dataclass(frozen=True)
class Type:
    content: str


@dataclass(frozen=True)
class Scroll:
    point: Point
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise BadDirection(f"scroll direction must be one of {DIRECTIONS}, got {self.direction!r}")


@dataclass(frozen=True)
class Wait:
    pass


@dataclass(frozen=True)
class Finished:
    content: str = ""


@dataclass(frozen=True)
class Navigate:
    """Engine-level URL load; never produced by the grounding model."""

    url: str


ActionCommand = Union[Click, DoubleClick, RightClick, Drag, Hotkey, Type, Scroll, Wait, Finished, Navigate]

WIRE_NAMES: dict[type, str] = {
    Click: "click",
    DoubleClick: "left_double",
    RightClick: "right_single",
    Drag: "drag",
    Hotkey: "hotkey",
    Type: "type",
    Scroll: "scroll",
    Wait: "wait",
    Finished: "finished",
}
ENGINE_NAMES: dict[type, str] = {Navigate: "navigate"}

GRAMMAR_ACTIONS = tuple(WIRE_NAMES.values())
POINTER_ACTIONS = (Click, DoubleClick, RightClick)


@dataclass(frozen=True)
class ModelTurn:
    thought: str
    action: ActionCommand
    raw: str = field(default="", compare=False)


def action_name(action: ActionCommand) -> str:
    return WIRE_NAMES.get(type(action)) or ENGINE_NAMES[type(action)]


# -- escaping -----------------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "'": "\\'", '"': '\\"', "\n": "\\n", "\t": "\\t", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "'": "'", '"': '"', "n": "\n", "t": "\t", "r": "\r"}


def escape(text: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in text)


def unescape(text: str) -> str:
    """Resolve backslash escapes; unknown escapes are kept verbatim."""
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text) and text[i + 1] in _UNESCAPES:
            out.append(_UNESCAPES[text[i + 1]])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


# -- tokenizer ----------------------------------------------------------------

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


@dataclass
class _Call:
    name: str
    args: dict[str, str]
    end: int


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i].isspace():
        i += 1
    return i


def _read_quoted(text: str, i: int) -> tuple[str, int]:
    quote = text[i]
    i += 1
    start = i
    while i < len(text):
        c = text[i]
        if c == "\\":
            i += 2
            continue
        if c == quote:
            j = _skip_ws(text, i + 1)
            # a quote only closes the value if an argument separator follows;
            # lets unescaped apostrophes ("it's") through
            if j >= len(text) or text[j] in ",)":
                return text[start:i], i + 1
        i += 1
    raise BadArguments("unterminated quoted argument")


def _read_call(text: str, pos: int = 0) -> _Call:
    i = _skip_ws(text, pos)
    m = _IDENT.match(text, i)
    if not m:
        raise MalformedOutput(f"expected an action name at {text[i:i + 20]!r}")
    name = m.group(0)
    i = _skip_ws(text, m.end())
    if i >= len(text) or text[i] != "(":
        raise BadArguments(f"expected '(' after {name!r}")
    i += 1
    args: dict[str, str] = {}
    while True:
        i = _skip_ws(text, i)
        if i >= len(text):
            raise BadArguments(f"unterminated argument list for {name!r}")
        if text[i] == ")":
            return _Call(name, args, i + 1)
        km = _IDENT.match(text, i)
        if not km:
            raise BadArguments(f"expected keyword argument in {name!r} at {text[i:i + 20]!r}")
        key = km.group(0)
        i = _skip_ws(text, km.end())
        if i >= len(text) or text[i] != "=":
            raise BadArguments(f"expected '=' after argument {key!r}")
        i = _skip_ws(text, i + 1)
        if i < len(text) and text[i] in "'\"":
            value, i = _read_quoted(text, i)
        else:
            j = i
            while j < len(text) and text[j] not in ",)":
                j += 1
            value = text[i:j].strip()
            if "(" in value:
                # bare tuple such as point=(1,2)
                close = text.find(")", i)
                if close < 0:
                    raise BadArguments("unterminated bare tuple argument")
                value, j = text[i:close + 1].strip(), close + 1
            i = j
        if key in args:
            raise BadArguments(f"duplicate argument {key!r}")
        args[key] = value
        i = _skip_ws(text, i)
        if i < len(text) and text[i] == ",":
            i += 1
        elif i < len(text) and text[i] == ")":
            continue
        elif i >= len(text):
            raise BadArguments(f"unterminated argument list for {name!r}")
        else:
            raise BadArguments(f"unexpected {text[i]!r} in arguments of {name!r}")


# -- argument decoding ----------------------------------------------------------

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def _coord(raw: str) -> int:
    value = float(raw)
    if value < 0:
        raise BadArguments(f"negative coordinate {raw}")
    return math.floor(value + 0.5)


def _parse_point(raw: str) -> Point:
    numbers = _NUMBER.findall(raw)
    if len(numbers) == 2:
        return Point(_coord(numbers[0]), _coord(numbers[1]), MODEL)
    if len(numbers) == 4:
        # legacy box form (x1, y1, x2, y2): use its centre
        x1, y1, x2, y2 = (float(n) for n in numbers)
        return Point(_coord(str((x1 + x2) / 2)), _coord(str((y1 + y2) / 2)), MODEL)
    raise BadArguments(f"cannot read a point from {raw!r}")


_ALIASES = {
    "point": ("point", "start_box"),
    "start_point": ("start_point", "start_box"),
    "end_point": ("end_point", "end_box"),
    "key": ("key", "keys", "hotkey"),
    "content": ("content", "text"),
    "direction": ("direction",),
    "url": ("url",),
}


def _take(name: str, args: dict[str, str], required: tuple[str, ...], optional: tuple[str, ...] = ()) -> dict[str, str]:
    out: dict[str, str] = {}
    used = set()
    for canonical in required + optional:
        for alias in _ALIASES[canonical]:
            if alias in args:
                if canonical in out:
                    raise BadArguments(f"{name}: {canonical!r} given twice")
                out[canonical] = args[alias]
                used.add(alias)
        if canonical in required and canonical not in out:
            raise BadArguments(f"{name}: missing argument {canonical!r}")
    extra = set(args) - used
    if extra:
        raise BadArguments(f"{name}: unexpected arguments {sorted(extra)}")
    return out


def _build(call: _Call, allow_engine: bool) -> ActionCommand:
    name, args = call.name, call.args
    if name in ("click", "left_single"):
        return Click(_parse_point(_take(name, args, ("point",))["point"]))
    if name == "left_double":
        return DoubleClick(_parse_point(_take(name, args, ("point",))["point"]))
    if name == "right_single":
        return RightClick(_parse_point(_take(name, args, ("point",))["point"]))
    if name == "drag":
        a = _take(name, args, ("start_point", "end_point"))
        return Drag(_parse_point(a["start_point"]), _parse_point(a["end_point"]))
    if name == "hotkey":
        keys = unescape(_take(name, args, ("key",))["key"]).lower().split()
        return Hotkey(tuple(keys))
    if name == "type":
        return Type(unescape(_take(name, args, ("content",))["content"]))
    if name == "scroll":
        a = _take(name, args, ("point", "direction"))
        return Scroll(_parse_point(a["point"]), unescape(a["direction"]).strip().lower())
    if name == "wait":
        _take(name, args, ())
        return Wait()
    if name == "finished":
        return Finished(unescape(_take(name, args, (), ("content",)).get("content", "")))
    if name == "navigate" and allow_engine:
        url = unescape(_take(name, args, ("url",))["url"]).strip()
        if not url:
            raise BadArguments("navigate: empty url")
        return Navigate(url)
    raise UnknownAction(f"unknown action {name!r}")


def parse_action(text: str, *, allow_engine: bool = False) -> ActionCommand:
    """Parse one ``name(arg='...', ...)`` expression.

    ``allow_engine`` additionally admits engine-only commands (``navigate``)
    as they appear in trajectory logs.
    """
    if not isinstance(text, str):
        raise MalformedOutput(f"expected text, got {type(text).__name__}")
    call = _read_call(text)
    if text[call.end:].strip():
        raise BadArguments(f"trailing text after action: {text[call.end:].strip()[:40]!r}")
    return _build(call, allow_engine)


_ACTION_LABEL = re.compile(r"(?:^|\n)[ \t>*_#]*Action[ \t*_]*:[ \t]*", re.IGNORECASE)
_THOUGHT_LABEL = re.compile(r"(?:^|\n)[ \t>*_#]*Thought[ \t*_]*:[ \t]*", re.IGNORECASE)


def _clean_thought(text: str) -> str:
    lines = [ln for ln in text.strip().splitlines() if not ln.strip().startswith("```")]
    return "\n".join(lines).strip()


def parse_model_output(text: str) -> ModelTurn:
    """Extract the first well-formed Thought/Action pair from a model reply."""
    if not isinstance(text, str):
        raise MalformedOutput(f"expected text, got {type(text).__name__}")
    labels = list(_ACTION_LABEL.finditer(text))
    if not labels:
        raise MalformedOutput("no 'Action:' line in model output")
    first_error: GrammarError | None = None
    prev_end = 0
    for m in labels:
        try:
            call = _read_call(text, m.end())
            action = _build(call, allow_engine=False)
        except GrammarError as exc:
            first_error = first_error or exc
            prev_end = m.end()
            continue
        head = text[prev_end:m.start()]
        thoughts = list(_THOUGHT_LABEL.finditer(head))
        thought = _clean_thought(head[thoughts[-1].end():]) if thoughts else ""
        return ModelTurn(thought=thought, action=action, raw=text)
    raise first_error


def _pt(p: Point) -> str:
    return f"'<point>{p.x} {p.y}</point>'"


def serialize_action(action: ActionCommand) -> str:
    """Canonical single-quoted text form of ``action``."""
    if isinstance(action, (Click, DoubleClick, RightClick)):
        return f"{WIRE_NAMES[type(action)]}(point={_pt(action.point)})"
    if isinstance(action, Drag):
        return f"drag(start_point={_pt(action.start)}, end_point={_pt(action.end)})"
    if isinstance(action, Hotkey):
        return f"hotkey(key='{escape(' '.join(action.keys))}')"
    if isinstance(action, Type):
        return f"type(content='{escape(action.content)}')"
    if isinstance(action, Scroll):
        return f"scroll(point={_pt(action.point)}, direction='{action.direction}')"
    if isinstance(action, Wait):
        return "wait()"
    if isinstance(action, Finished):
        return f"finished(content='{escape(action.content)}')"
    if isinstance(action, Navigate):
        return f"navigate(url='{escape(action.url)}')"
    raise TypeError(f"not an action command: {action!r}")


def format_model_turn(thought: str, action: ActionCommand) -> str:
    return f"Thought: {thought}\nAction: {serialize_action(action)}"


# -- coordinate mapping ---------------------------------------------------------

def _extent(value, label: str) -> tuple[int, int]:
    w, h = value
    if w <= 0 or h <= 0:
        raise NonPositiveExtent(f"{label} must be positive, got {w}x{h}")
    return int(w), int(h)


def _rescale(v: int, src: int, dst: int) -> int:
    # round-half-up of v * dst / src in exact integer arithmetic
    return (2 * v * dst + src) // (2 * src)


def scale_point(p: Point, model_extent=DEFAULT_MODEL_EXTENT, viewport=(1280, 800)) -> Point:
    """Map a model-space point onto viewport pixels, clamped inside the viewport."""
    mw, mh = _extent(model_extent, "model extent")
    vw, vh = _extent(viewport, "viewport")
    if p.space != MODEL:
        raise SpaceMismatch("scale_point expects a model-space point")
    x = min(max(_rescale(p.x, mw, vw), 0), vw - 1)
    y = min(max(_rescale(p.y, mh, vh), 0), vh - 1)
    return Point(x, y, PIXEL)


def to_model_space(x: float, y: float, image_size, model_extent=DEFAULT_MODEL_EXTENT) -> Point:
    """Inverse of :func:`scale_point` for a pixel location (may be fractional)."""
    iw, ih = _extent(image_size, "image size")
    mw, mh = _extent(model_extent, "model extent")
    mx = math.floor(x * mw / iw + 0.5)
    my = math.floor(y * mh / ih + 0.5)
    return Point(min(max(mx, 0), mw), min(max(my, 0), mh), MODEL)


def scale_action(action: ActionCommand, model_extent=DEFAULT_MODEL_EXTENT, viewport=(1280, 800)) -> ActionCommand:
    """Return ``action`` with every point converted to pixel space."""
    changes = {}
    for f in fields(action):
        value = getattr(action, f.name)
        if isinstance(value, Point):
            changes[f.name] = value if value.space == PIXEL else scale_point(value, model_extent, viewport)
    return replace(action, **changes) if changes else action


def action_points(action: ActionCommand) -> list[Point]:
    return [getattr(action, f.name) for f in fields(action) if isinstance(getattr(action, f.name), Point)]
