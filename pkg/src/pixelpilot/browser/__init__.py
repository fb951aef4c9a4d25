"""Browser environments: a devtools-driven Chromium and a simulated page graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .base import (
    DEFAULT_SCROLL_FRACTION,
    DEFAULT_SETTLE_TIMEOUT,
    DEFAULT_VIEWPORT,
    DEFAULT_WAIT_SECONDS,
    BadPageGraph,
    BrowserError,
    Environment,
    ExecStatus,
    ExecutionOutcome,
    LaunchFailure,
    PointOutOfViewport,
    Screenshot,
    SessionClosed,
    average_hash,
)
from .simulated import PageGraph, SimulatedEnvironment, load_page_graph

__all__ = [
    "BadPageGraph",
    "BrowserError",
    "EnvConfig",
    "Environment",
    "ExecStatus",
    "ExecutionOutcome",
    "LaunchFailure",
    "PageGraph",
    "PointOutOfViewport",
    "Screenshot",
    "SessionClosed",
    "SimulatedEnvironment",
    "average_hash",
    "load_page_graph",
    "open_session",
]


@dataclass
class EnvConfig:
    """How to open a session. ``kind`` is ``"browser"`` or ``"simulated"``."""

    kind: str = "browser"
    viewport: tuple[int, int] = DEFAULT_VIEWPORT
    page_graph: PageGraph | str | Path | dict | None = None
    executable: str | None = None
    ws_endpoint: str | None = None
    headless: bool = True
    settle_timeout: float = DEFAULT_SETTLE_TIMEOUT
    wait_seconds: float = DEFAULT_WAIT_SECONDS
    scroll_fraction: float = DEFAULT_SCROLL_FRACTION
    extra_args: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        graph = self.page_graph
        return {
            "kind": self.kind,
            "viewport": list(self.viewport),
            "page_graph": str(graph) if isinstance(graph, (str, Path)) else None,
            "settle_timeout": self.settle_timeout,
            "wait_seconds": self.wait_seconds,
            "scroll_fraction": self.scroll_fraction,
        }


def open_session(config: EnvConfig) -> Environment:
    if config.kind == "simulated":
        if config.page_graph is None:
            raise BadPageGraph("simulated sessions need a page graph")
        graph = config.page_graph if isinstance(config.page_graph, PageGraph) else load_page_graph(config.page_graph)
        return SimulatedEnvironment(graph, wait_seconds=config.wait_seconds, scroll_fraction=config.scroll_fraction)
    if config.kind == "browser":
        from .cdp import BrowserEnvironment

        return BrowserEnvironment(
            config.viewport,
            executable=config.executable,
            ws_endpoint=config.ws_endpoint,
            headless=config.headless,
            settle_timeout=config.settle_timeout,
            wait_seconds=config.wait_seconds,
            scroll_fraction=config.scroll_fraction,
            extra_args=tuple(config.extra_args),
        )
    raise ValueError(f"unknown environment kind {config.kind!r}")
