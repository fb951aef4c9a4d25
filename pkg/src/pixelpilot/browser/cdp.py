"""Real headless browser driven over the Chrome devtools protocol.

Only input events go in and only screenshots and the URL come out; the page's
DOM is never read. A session launches its own Chromium (or attaches to a
running one via ``ws_endpoint``), opens a fresh tab and pins the viewport
with device-metrics emulation.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import shutil
import struct
import subprocess
import tempfile
import threading
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from pathlib import Path
from typing import Callable

from websockets.exceptions import ConnectionClosed
from websockets.sync.client import connect

from ..grammar import (
    ActionCommand,
    Click,
    DoubleClick,
    Drag,
    Finished,
    Hotkey,
    Navigate,
    RightClick,
    Scroll,
    Type,
    Wait,
)
from .base import (
    DEFAULT_SCROLL_FRACTION,
    DEFAULT_SETTLE_TIMEOUT,
    DEFAULT_VIEWPORT,
    DEFAULT_WAIT_SECONDS,
    BrowserError,
    Environment,
    ExecutionOutcome,
    LaunchFailure,
    Screenshot,
    SessionClosed,
)

logger = logging.getLogger(__name__)

CHROME_ENV_VAR = "PIXELPILOT_CHROME"
CHROME_NAMES = ("chromium", "chromium-browser", "google-chrome", "google-chrome-stable", "chrome", "headless_shell")

DRAG_STEPS = 10
DRAG_MILLIS = 300
IDLE_MILLIS = 500


class CDPError(BrowserError):
    pass


def find_chrome(explicit: str | None = None) -> str | None:
    """Locate a Chromium binary: explicit path, ``$PIXELPILOT_CHROME``, then ``$PATH``."""
    for candidate in (explicit, os.environ.get(CHROME_ENV_VAR)):
        if candidate:
            return candidate if Path(candidate).exists() else shutil.which(candidate)
    for name in CHROME_NAMES:
        found = shutil.which(name)
        if found:
            return found
    return None


class CDPConnection:
    """Minimal JSON-RPC client for one devtools websocket."""

    def __init__(self, ws_url: str, timeout: float = 30.0):
        self.timeout = timeout
        try:
            self._ws = connect(ws_url, max_size=None, open_timeout=timeout)
        except (OSError, TimeoutError) as exc:
            raise LaunchFailure(f"cannot connect to {ws_url}: {exc}") from exc
        self._lock = threading.Lock()
        self._next_id = 0
        self._pending: dict[int, Future] = {}
        self._listeners: list[Callable[[dict], None]] = []
        self.closed = False
        self._reader = threading.Thread(target=self._read_loop, name="cdp-reader", daemon=True)
        self._reader.start()

    def add_listener(self, fn: Callable[[dict], None]) -> None:
        self._listeners.append(fn)

    def _read_loop(self) -> None:
        try:
            for raw in self._ws:
                msg = json.loads(raw)
                if "id" in msg:
                    with self._lock:
                        fut = self._pending.pop(msg["id"], None)
                    if fut is None:
                        continue
                    if "error" in msg:
                        fut.set_exception(CDPError(f"{msg['error'].get('message')} ({msg['error'].get('code')})"))
                    else:
                        fut.set_result(msg.get("result", {}))
                else:
                    for fn in list(self._listeners):
                        try:
                            fn(msg)
                        except Exception:  # listener bugs must not kill the reader
                            logger.exception("devtools event listener failed")
        except ConnectionClosed:
            pass
        finally:
            self.closed = True
            with self._lock:
                pending, self._pending = self._pending, {}
            for fut in pending.values():
                fut.set_exception(SessionClosed("devtools connection closed"))

    def send(self, method: str, params: dict | None = None, session_id: str | None = None, timeout: float | None = None) -> dict:
        if self.closed:
            raise SessionClosed("devtools connection closed")
        fut: Future = Future()
        with self._lock:
            self._next_id += 1
            msg_id = self._next_id
            self._pending[msg_id] = fut
        msg = {"id": msg_id, "method": method, "params": params or {}}
        if session_id:
            msg["sessionId"] = session_id
        try:
            self._ws.send(json.dumps(msg))
        except ConnectionClosed:
            raise SessionClosed("devtools connection closed") from None
        try:
            return fut.result(timeout or self.timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(msg_id, None)
            raise CDPError(f"{method} timed out") from None

    def close(self) -> None:
        self.closed = True
        self._ws.close()


class ChromeProcess:
    """A headless Chromium child process with a throwaway profile."""

    def __init__(self, executable: str, viewport: tuple[int, int], headless: bool = True,
                 extra_args: tuple[str, ...] = (), launch_timeout: float = 20.0):
        self.profile = tempfile.mkdtemp(prefix="pixelpilot-chrome-")
        w, h = viewport
        args = [
            executable,
            "--remote-debugging-port=0",
            f"--user-data-dir={self.profile}",
            f"--window-size={w},{h}",
            "--no-first-run",
            "--no-default-browser-check",
            "--disable-gpu",
            "--disable-dev-shm-usage",
            "--disable-extensions",
            "--disable-background-networking",
            "--hide-scrollbars",
            "--mute-audio",
            "--no-zygote",
        ]
        if headless:
            args.append("--headless")
        if hasattr(os, "geteuid") and os.geteuid() == 0:
            args.append("--no-sandbox")
        args.extend(extra_args)
        args.append("about:blank")
        self._log = open(Path(self.profile) / "chrome.log", "wb")
        try:
            self.proc = subprocess.Popen(args, stdout=subprocess.DEVNULL, stderr=self._log)
        except OSError as exc:
            self._log.close()
            shutil.rmtree(self.profile, ignore_errors=True)
            raise LaunchFailure(f"cannot start {executable}: {exc}") from exc
        self.ws_url = self._await_endpoint(launch_timeout)

    def _await_endpoint(self, timeout: float) -> str:
        port_file = Path(self.profile) / "DevToolsActivePort"
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                self.close()
                raise LaunchFailure(f"browser exited with code {self.proc.returncode}")
            if port_file.exists():
                lines = port_file.read_text().split()
                if len(lines) >= 2:
                    return f"ws://127.0.0.1:{lines[0]}{lines[1]}"
            time.sleep(0.05)
        self.close()
        raise LaunchFailure(f"browser did not expose a devtools endpoint within {timeout}s")

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait(5)
        self._log.close()
        shutil.rmtree(self.profile, ignore_errors=True)


# key name -> (key, code, windows virtual key code, text)
_KEYS: dict[str, tuple[str, str, int, str]] = {
    "enter": ("Enter", "Enter", 13, "\r"),
    "return": ("Enter", "Enter", 13, "\r"),
    "tab": ("Tab", "Tab", 9, ""),
    "escape": ("Escape", "Escape", 27, ""),
    "esc": ("Escape", "Escape", 27, ""),
    "backspace": ("Backspace", "Backspace", 8, ""),
    "delete": ("Delete", "Delete", 46, ""),
    "space": (" ", "Space", 32, " "),
    "up": ("ArrowUp", "ArrowUp", 38, ""),
    "down": ("ArrowDown", "ArrowDown", 40, ""),
    "left": ("ArrowLeft", "ArrowLeft", 37, ""),
    "right": ("ArrowRight", "ArrowRight", 39, ""),
    "arrowup": ("ArrowUp", "ArrowUp", 38, ""),
    "arrowdown": ("ArrowDown", "ArrowDown", 40, ""),
    "arrowleft": ("ArrowLeft", "ArrowLeft", 37, ""),
    "arrowright": ("ArrowRight", "ArrowRight", 39, ""),
    "home": ("Home", "Home", 36, ""),
    "end": ("End", "End", 35, ""),
    "pageup": ("PageUp", "PageUp", 33, ""),
    "pagedown": ("PageDown", "PageDown", 34, ""),
}
_KEYS.update({f"f{i}": (f"F{i}", f"F{i}", 111 + i, "") for i in range(1, 13)})
_KEYS.update({c: (c, f"Key{c.upper()}", ord(c.upper()), c) for c in "abcdefghijklmnopqrstuvwxyz"})
_KEYS.update({d: (d, f"Digit{d}", ord(d), d) for d in "0123456789"})

# modifier name -> (key, code, virtual key code, modifier bit)
_MODIFIERS: dict[str, tuple[str, str, int, int]] = {
    "alt": ("Alt", "AltLeft", 18, 1),
    "option": ("Alt", "AltLeft", 18, 1),
    "ctrl": ("Control", "ControlLeft", 17, 2),
    "control": ("Control", "ControlLeft", 17, 2),
    "meta": ("Meta", "MetaLeft", 91, 4),
    "cmd": ("Meta", "MetaLeft", 91, 4),
    "command": ("Meta", "MetaLeft", 91, 4),
    "win": ("Meta", "MetaLeft", 91, 4),
    "super": ("Meta", "MetaLeft", 91, 4),
    "shift": ("Shift", "ShiftLeft", 16, 8),
}


class BrowserEnvironment(Environment):
    def __init__(
        self,
        viewport: tuple[int, int] = DEFAULT_VIEWPORT,
        *,
        executable: str | None = None,
        ws_endpoint: str | None = None,
        headless: bool = True,
        settle_timeout: float = DEFAULT_SETTLE_TIMEOUT,
        wait_seconds: float = DEFAULT_WAIT_SECONDS,
        scroll_fraction: float = DEFAULT_SCROLL_FRACTION,
        extra_args: tuple[str, ...] = (),
        launch_timeout: float = 20.0,
    ):
        self.viewport = (int(viewport[0]), int(viewport[1]))
        self.settle_timeout = settle_timeout
        self.wait_seconds = wait_seconds
        self.scroll_fraction = scroll_fraction
        self._chrome: ChromeProcess | None = None
        self._closed = False
        if ws_endpoint is None:
            exe = find_chrome(executable)
            if exe is None:
                raise LaunchFailure(f"no Chromium binary found; set {CHROME_ENV_VAR} or put chromium on PATH")
            self._chrome = ChromeProcess(exe, self.viewport, headless, extra_args, launch_timeout)
            ws_endpoint = self._chrome.ws_url
        try:
            self._conn = CDPConnection(ws_endpoint)
            self._inflight: set[str] = set()
            self._loading: set[str] = set()
            self._last_activity = time.monotonic()
            self._activity_lock = threading.Lock()
            self._target = self._conn.send("Target.createTarget", {"url": "about:blank"})["targetId"]
            self._session = self._conn.send("Target.attachToTarget", {"targetId": self._target, "flatten": True})["sessionId"]
            self._conn.add_listener(self._on_event)
            self._send("Page.enable")
            self._send("Network.enable")
            w, h = self.viewport
            self._send("Emulation.setDeviceMetricsOverride",
                       {"width": w, "height": h, "deviceScaleFactor": 1, "mobile": False})
            self._send("Emulation.setScrollbarsHidden", {"hidden": True})
        except Exception:
            self.close()
            raise

    def _send(self, method: str, params: dict | None = None, timeout: float | None = None) -> dict:
        if self._closed:
            raise SessionClosed("browser session is closed")
        return self._conn.send(method, params, self._session, timeout)

    def _on_event(self, msg: dict) -> None:
        if msg.get("sessionId") != getattr(self, "_session", None):
            return
        method, params = msg.get("method", ""), msg.get("params", {})
        with self._activity_lock:
            if method == "Network.requestWillBeSent":
                self._inflight.add(params.get("requestId", ""))
            elif method in ("Network.loadingFinished", "Network.loadingFailed"):
                self._inflight.discard(params.get("requestId", ""))
            elif method == "Page.frameStartedLoading":
                self._loading.add(params.get("frameId", ""))
            elif method == "Page.frameStoppedLoading":
                self._loading.discard(params.get("frameId", ""))
            else:
                return
            self._last_activity = time.monotonic()

    def settle(self) -> bool:
        """Block until the network has been idle for a moment, capped at ``settle_timeout``."""
        deadline = time.monotonic() + self.settle_timeout
        time.sleep(0.05)
        while True:
            now = time.monotonic()
            with self._activity_lock:
                idle = not self._inflight and not self._loading and now - self._last_activity >= IDLE_MILLIS / 1000
            if idle:
                return True
            if now >= deadline:
                logger.info("settle timeout after %.1fs", self.settle_timeout)
                return False
            time.sleep(0.02)

    @property
    def current_url(self) -> str:
        if self._closed:
            raise SessionClosed("browser session is closed")
        return self._conn.send("Target.getTargetInfo", {"targetId": self._target})["targetInfo"]["url"]

    def screenshot(self) -> Screenshot:
        data = self._send("Page.captureScreenshot", {"format": "png", "captureBeyondViewport": False})["data"]
        png = base64.b64decode(data)
        width, height = struct.unpack(">II", png[16:24])
        if (width, height) != self.viewport:
            raise BrowserError(f"captured {width}x{height}, expected viewport {self.viewport}")
        return Screenshot(png, width, height, self.current_url)

    # -- input --

    def _mouse(self, kind: str, x: int, y: int, button: str = "none", clicks: int = 0, buttons: int = 0, **extra) -> None:
        params = {"type": kind, "x": x, "y": y, "button": button, "clickCount": clicks, "buttons": buttons}
        params.update(extra)
        self._send("Input.dispatchMouseEvent", params)

    def _click(self, x: int, y: int, button: str = "left", count: int = 1) -> None:
        mask = {"left": 1, "right": 2}[button]
        self._mouse("mouseMoved", x, y)
        for n in range(1, count + 1):
            self._mouse("mousePressed", x, y, button, n, mask)
            self._mouse("mouseReleased", x, y, button, n, 0)

    def _drag(self, action: Drag) -> None:
        (x0, y0), (x1, y1) = (action.start.x, action.start.y), (action.end.x, action.end.y)
        self._mouse("mouseMoved", x0, y0)
        self._mouse("mousePressed", x0, y0, "left", 1, 1)
        for i in range(1, DRAG_STEPS + 1):
            t = i / DRAG_STEPS
            self._mouse("mouseMoved", round(x0 + (x1 - x0) * t), round(y0 + (y1 - y0) * t), "left", 0, 1)
            time.sleep(DRAG_MILLIS / 1000 / DRAG_STEPS)
        self._mouse("mouseReleased", x1, y1, "left", 1, 0)

    def _key(self, kind: str, key: str, code: str, vk: int, modifiers: int, text: str = "") -> None:
        params = {"type": kind, "key": key, "code": code, "windowsVirtualKeyCode": vk, "modifiers": modifiers}
        if text:
            params["text"] = text
            params["unmodifiedText"] = text
        self._send("Input.dispatchKeyEvent", params)

    def _hotkey(self, keys: tuple[str, ...]) -> ExecutionOutcome:
        if keys == ("alt", "left"):
            return self.back()
        if keys == ("alt", "right"):
            return self._history_step(+1)
        if keys in (("f5",), ("ctrl", "r")):
            self._send("Page.reload")
            self.settle()
            return ExecutionOutcome.ok("reloaded")
        mods = [k for k in keys if k in _MODIFIERS]
        main = [k for k in keys if k not in _MODIFIERS]
        unknown = [k for k in main if k not in _KEYS]
        if unknown or len(main) > 1:
            return ExecutionOutcome.error(f"unsupported key chord {' '.join(keys)!r}")
        bits = 0
        for m in mods:
            key, code, vk, bit = _MODIFIERS[m]
            bits |= bit
            self._key("rawKeyDown", key, code, vk, bits)
        if main:
            key, code, vk, text = _KEYS[main[0]]
            plain = not bits & (1 | 2 | 4)
            if plain and text:
                shown = text.upper() if bits & 8 and len(text) == 1 else text
                self._key("keyDown", key, code, vk, bits, shown)
            else:
                self._key("rawKeyDown", key, code, vk, bits)
            self._key("keyUp", key, code, vk, bits)
        for m in reversed(mods):
            key, code, vk, bit = _MODIFIERS[m]
            bits &= ~bit
            self._key("keyUp", key, code, vk, bits)
        return ExecutionOutcome.ok()

    def _type(self, text: str) -> None:
        for i, chunk in enumerate(text.split("\n")):
            if i:
                self._key("keyDown", "Enter", "Enter", 13, 0, "\r")
                self._key("keyUp", "Enter", "Enter", 13, 0)
            if chunk:
                self._send("Input.insertText", {"text": chunk})

    def execute(self, action: ActionCommand) -> ExecutionOutcome:
        if self._closed:
            raise SessionClosed("browser session is closed")
        self.check_points(action)
        if isinstance(action, Wait):
            time.sleep(self.wait_seconds)
            return ExecutionOutcome.ok("waited")
        if isinstance(action, Finished):
            return ExecutionOutcome.ok()
        if isinstance(action, Navigate):
            return self.navigate(action.url)
        try:
            if isinstance(action, Click):
                self._click(action.point.x, action.point.y)
            elif isinstance(action, DoubleClick):
                self._click(action.point.x, action.point.y, count=2)
            elif isinstance(action, RightClick):
                self._click(action.point.x, action.point.y, button="right")
            elif isinstance(action, Drag):
                self._drag(action)
            elif isinstance(action, Hotkey):
                return self._hotkey(action.keys)
            elif isinstance(action, Type):
                self._type(action.content)
            elif isinstance(action, Scroll):
                w, h = self.viewport
                dx = {"left": -1, "right": 1}.get(action.direction, 0) * round(w * self.scroll_fraction)
                dy = {"up": -1, "down": 1}.get(action.direction, 0) * round(h * self.scroll_fraction)
                self._mouse("mouseWheel", action.point.x, action.point.y, deltaX=dx, deltaY=dy)
            else:
                raise TypeError(f"not an action command: {action!r}")
        except CDPError as exc:
            return ExecutionOutcome.error(str(exc))
        self.settle()
        return ExecutionOutcome.ok()

    def navigate(self, url: str) -> ExecutionOutcome:
        try:
            result = self._send("Page.navigate", {"url": url}, timeout=self.settle_timeout + 5)
        except CDPError as exc:
            return ExecutionOutcome.error(f"NavigationFailure: {exc}")
        if result.get("errorText"):
            return ExecutionOutcome.error(f"NavigationFailure: {result['errorText']}")
        if not self.settle():
            return ExecutionOutcome.ok(f"settle timeout while loading {url}")
        return ExecutionOutcome.ok(f"loaded {url}")

    def _history_step(self, delta: int) -> ExecutionOutcome:
        history = self._send("Page.getNavigationHistory")
        index = history["currentIndex"] + delta
        if not 0 <= index < len(history["entries"]):
            return ExecutionOutcome.no_effect("no history entry in that direction")
        self._send("Page.navigateToHistoryEntry", {"entryId": history["entries"][index]["id"]})
        self.settle()
        return ExecutionOutcome.ok(f"history {'back' if delta < 0 else 'forward'}")

    def back(self) -> ExecutionOutcome:
        return self._history_step(-1)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        conn = getattr(self, "_conn", None)
        if conn is not None and not conn.closed:
            try:
                if hasattr(self, "_target"):
                    conn.send("Target.closeTarget", {"targetId": self._target}, timeout=5)
            except BrowserError:
                pass
            conn.close()
        if self._chrome is not None:
            self._chrome.close()
