"""Deterministic stand-in for a browser, driven by a declarative page graph.

A page graph is a JSON or YAML document::

    schema_version: 1
    viewport: {width: 1280, height: 800}
    start: home
    pages:
      home:
        url: https://shop.test/        # optional, defaults to https://sim.test/<page id>
        title: Shop
        hotspots:
          - {rect: [100, 100, 300, 160], next: results, label: Search}
        text_fields:
          - {rect: [100, 40, 600, 80], label: query, submit: results}

Rects are inclusive ``[x1, y1, x2, y2]`` pixel boxes inside the viewport.
Clicking a hotspot follows its transition, clicking a text field focuses it,
and typed text ending in a newline submits the focused field. Pages are drawn
procedurally so screenshots are byte-identical for identical states.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import yaml
from PIL import Image, ImageDraw, ImageFont

from ..grammar import (
    ActionCommand,
    Click,
    DoubleClick,
    Drag,
    Finished,
    Hotkey,
    Navigate,
    Point,
    RightClick,
    Scroll,
    Type,
    Wait,
)
from ..resources import read_json
from .base import (
    DEFAULT_SCROLL_FRACTION,
    DEFAULT_VIEWPORT,
    DEFAULT_WAIT_SECONDS,
    BadPageGraph,
    Environment,
    ExecutionOutcome,
    Screenshot,
    SessionClosed,
)

Rect = tuple[int, int, int, int]

SIM_URL_PREFIX = "https://sim.test/"


def in_rect(rect: Rect, x: int, y: int) -> bool:
    x1, y1, x2, y2 = rect
    return x1 <= x <= x2 and y1 <= y <= y2


@dataclass(frozen=True)
class Hotspot:
    rect: Rect
    next_page_id: str
    label: str = ""


@dataclass(frozen=True)
class TextField:
    rect: Rect
    label: str
    submit: str | None = None


@dataclass(frozen=True)
class Page:
    page_id: str
    url: str
    title: str = ""
    background: str = "#ffffff"
    text: tuple[str, ...] = ()
    hotspots: tuple[Hotspot, ...] = ()
    text_fields: tuple[TextField, ...] = ()

    def labels(self) -> list[str]:
        return [h.label for h in self.hotspots if h.label] + [f.label for f in self.text_fields]

    def target_at(self, x: int, y: int) -> Hotspot | TextField | None:
        for target in (*self.hotspots, *self.text_fields):
            if in_rect(target.rect, x, y):
                return target
        return None


@dataclass(frozen=True)
class PageGraph:
    pages: dict[str, Page]
    start: str
    viewport: tuple[int, int] = DEFAULT_VIEWPORT

    def page_for(self, ref: str) -> Page | None:
        """Look a page up by id or by URL."""
        if ref in self.pages:
            return self.pages[ref]
        for page in self.pages.values():
            if page.url == ref or page.url.rstrip("/") == ref.rstrip("/"):
                return page
        return None

    def reachable(self, start: str | None = None) -> set[str]:
        seen: set[str] = set()
        todo = [start or self.start]
        while todo:
            pid = todo.pop()
            if pid in seen or pid not in self.pages:
                continue
            seen.add(pid)
            page = self.pages[pid]
            todo.extend(h.next_page_id for h in page.hotspots)
            todo.extend(f.submit for f in page.text_fields if f.submit)
        return seen


def _rect(raw, viewport, where: str) -> Rect:
    x1, y1, x2, y2 = (int(v) for v in raw)
    w, h = viewport
    if not (0 <= x1 <= x2 < w and 0 <= y1 <= y2 < h):
        raise BadPageGraph(f"{where}: rect {list(raw)} is not inside the {w}x{h} viewport")
    return (x1, y1, x2, y2)


def page_graph_from_dict(doc: dict) -> PageGraph:
    try:
        jsonschema.validate(doc, read_json("page_graph.schema.json"))
    except jsonschema.ValidationError as exc:
        raise BadPageGraph(f"page graph does not match schema: {exc.message}") from None
    vp = doc.get("viewport") or {}
    viewport = (int(vp.get("width", DEFAULT_VIEWPORT[0])), int(vp.get("height", DEFAULT_VIEWPORT[1])))
    pages: dict[str, Page] = {}
    for pid, spec in doc["pages"].items():
        hotspots = tuple(
            Hotspot(_rect(h["rect"], viewport, f"page {pid!r}"), h["next"], h.get("label", ""))
            for h in spec.get("hotspots", [])
        )
        fields_ = tuple(
            TextField(_rect(f["rect"], viewport, f"page {pid!r}"), f["label"], f.get("submit"))
            for f in spec.get("text_fields", [])
        )
        pages[pid] = Page(
            page_id=pid,
            url=spec.get("url", SIM_URL_PREFIX + pid),
            title=spec.get("title", pid),
            background=spec.get("background", "#ffffff"),
            text=tuple(spec.get("text", [])),
            hotspots=hotspots,
            text_fields=fields_,
        )
    for page in pages.values():
        targets = [h.next_page_id for h in page.hotspots] + [f.submit for f in page.text_fields if f.submit]
        for target in targets:
            if target not in pages:
                raise BadPageGraph(f"page {page.page_id!r} links to missing page {target!r}")
    if doc["start"] not in pages:
        raise BadPageGraph(f"start page {doc['start']!r} is not defined")
    urls = [p.url for p in pages.values()]
    if len(set(urls)) != len(urls):
        raise BadPageGraph("page URLs must be unique")
    return PageGraph(pages=pages, start=doc["start"], viewport=viewport)


def load_page_graph(source: str | Path | dict) -> PageGraph:
    if isinstance(source, dict):
        return page_graph_from_dict(source)
    text = Path(source).read_text(encoding="utf-8")
    doc = json.loads(text) if str(source).endswith(".json") else yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise BadPageGraph(f"{source}: expected a mapping at top level")
    return page_graph_from_dict(doc)


_FONT = ImageFont.load_default()


class SimulatedEnvironment(Environment):
    """State machine over a :class:`PageGraph`; the reference environment for tests."""

    def __init__(
        self,
        graph: PageGraph,
        *,
        wait_seconds: float = DEFAULT_WAIT_SECONDS,
        scroll_fraction: float = DEFAULT_SCROLL_FRACTION,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.graph = graph
        self.viewport = graph.viewport
        self.page_id = graph.start
        self.history_stack: list[str] = []
        self.scroll: dict[str, tuple[int, int]] = {}
        self.values: dict[tuple[str, str], str] = {}
        self.focused: str | None = None
        self.wait_seconds = wait_seconds
        self.scroll_fraction = scroll_fraction
        self._sleep = sleep
        self._closed = False

    # -- introspection (tests and failure replay only) --

    @property
    def page(self) -> Page:
        return self.graph.pages[self.page_id]

    @property
    def current_url(self) -> str:
        self._check_open()
        return self.page.url

    def _check_open(self):
        if self._closed:
            raise SessionClosed("simulated session is closed")

    def close(self) -> None:
        self._closed = True

    # -- rendering --

    def render(self) -> bytes:
        w, h = self.viewport
        img = Image.new("RGB", (w, h), self.page.background)
        draw = ImageDraw.Draw(img)
        draw.rectangle((0, 0, w - 1, 28), fill="#20242c")
        draw.text((10, 8), self.page.title, fill="#ffffff", font=_FONT)
        for i, line in enumerate(self.page.text):
            draw.text((10, 36 + 14 * i), line, fill="#222222", font=_FONT)
        for spot in self.page.hotspots:
            draw.rectangle(spot.rect, fill="#3d7bd9", outline="#1b3f7a", width=2)
            draw.text((spot.rect[0] + 6, spot.rect[1] + 4), spot.label, fill="#ffffff", font=_FONT)
        for fld in self.page.text_fields:
            focused = fld.label == self.focused
            draw.rectangle(fld.rect, fill="#ffffff", outline="#d98c1b" if focused else "#777777", width=3 if focused else 1)
            value = self.values.get((self.page_id, fld.label), "")
            draw.text((fld.rect[0] + 6, fld.rect[1] + 4), value or fld.label, fill="#000000" if value else "#999999", font=_FONT)
        sx, sy = self.scroll.get(self.page_id, (0, 0))
        if sx or sy:
            draw.text((w - 140, h - 18), f"scroll {sx},{sy}", fill="#555555", font=_FONT)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()

    def screenshot(self) -> Screenshot:
        self._check_open()
        w, h = self.viewport
        return Screenshot(self.render(), w, h, self.page.url)

    # -- transitions --

    def _go(self, page_id: str) -> None:
        self.history_stack.append(self.page_id)
        self.page_id = page_id
        self.focused = None

    def navigate(self, url: str) -> ExecutionOutcome:
        self._check_open()
        page = self.graph.page_for(url)
        if page is None:
            return ExecutionOutcome.error(f"NavigationFailure: no page for {url!r}")
        self._go(page.page_id)
        return ExecutionOutcome.ok(f"loaded {page.url}")

    def back(self) -> ExecutionOutcome:
        self._check_open()
        if not self.history_stack:
            return ExecutionOutcome.no_effect("history is empty")
        self.page_id = self.history_stack.pop()
        self.focused = None
        return ExecutionOutcome.ok(f"back to {self.page.url}")

    def _press(self, point: Point) -> ExecutionOutcome:
        target = self.page.target_at(point.x, point.y)
        if target is None:
            return ExecutionOutcome.no_effect(f"nothing clickable at ({point.x}, {point.y})")
        if isinstance(target, TextField):
            self.focused = target.label
            return ExecutionOutcome.ok(f"focused {target.label!r}")
        self._go(target.next_page_id)
        return ExecutionOutcome.ok(f"followed {target.label or target.next_page_id!r}")

    def _submit(self) -> ExecutionOutcome:
        fld = next((f for f in self.page.text_fields if f.label == self.focused), None)
        if fld is None or fld.submit is None:
            return ExecutionOutcome.no_effect("nothing to submit")
        self._go(fld.submit)
        return ExecutionOutcome.ok(f"submitted {fld.label!r}")

    def _type(self, text: str) -> ExecutionOutcome:
        if self.focused is None:
            return ExecutionOutcome.no_effect("no focused field")
        key = (self.page_id, self.focused)
        for i, chunk in enumerate(text.split("\n")):
            if i:
                return self._submit()
            self.values[key] = self.values.get(key, "") + chunk
        return ExecutionOutcome.ok(f"typed into {self.focused!r}")

    def execute(self, action: ActionCommand) -> ExecutionOutcome:
        self._check_open()
        self.check_points(action)
        if isinstance(action, (Click, DoubleClick)):
            return self._press(action.point)
        if isinstance(action, RightClick):
            return ExecutionOutcome.no_effect("no context menus in the simulated browser")
        if isinstance(action, Drag):
            return ExecutionOutcome.no_effect("nothing draggable")
        if isinstance(action, Hotkey):
            if action.keys == ("alt", "left"):
                return self.back()
            if action.keys == ("enter",):
                return self._submit()
            if action.keys == ("backspace",) and self.focused is not None:
                key = (self.page_id, self.focused)
                self.values[key] = self.values.get(key, "")[:-1]
                return ExecutionOutcome.ok()
            return ExecutionOutcome.no_effect(f"hotkey {' '.join(action.keys)} has no binding")
        if isinstance(action, Type):
            return self._type(action.content)
        if isinstance(action, Scroll):
            w, h = self.viewport
            sx, sy = self.scroll.get(self.page_id, (0, 0))
            dx = round(w * self.scroll_fraction)
            dy = round(h * self.scroll_fraction)
            sx, sy = {
                "up": (sx, max(sy - dy, 0)),
                "down": (sx, sy + dy),
                "left": (max(sx - dx, 0), sy),
                "right": (sx + dx, sy),
            }[action.direction]
            self.scroll[self.page_id] = (sx, sy)
            return ExecutionOutcome.ok(f"scrolled {action.direction}")
        if isinstance(action, Wait):
            self._sleep(self.wait_seconds)
            return ExecutionOutcome.ok("waited")
        if isinstance(action, Finished):
            return ExecutionOutcome.ok()
        if isinstance(action, Navigate):
            return self.navigate(action.url)
        raise TypeError(f"not an action command: {action!r}")
