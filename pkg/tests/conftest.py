import functools
import io
import sys
import threading
from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from pixelpilot.browser import load_page_graph
from pixelpilot.browser.simulated import SimulatedEnvironment

FIXTURES = Path(__file__).parent / "fixtures"


def png(size=(64, 48), color="white") -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


def two_pages() -> dict:
    return {
        "start": "home",
        "pages": {
            "home": {
                "title": "Home",
                "hotspots": [{"rect": [100, 100, 300, 150], "next": "results", "label": "Search"}],
                "text_fields": [{"rect": [100, 200, 500, 240], "label": "query", "submit": "results"}],
            },
            "results": {"title": "Results", "text": ["The answer is 42"]},
        },
    }


@pytest.fixture
def graph_doc():
    return two_pages()


@pytest.fixture
def sim_env(graph_doc):
    env = SimulatedEnvironment(load_page_graph(graph_doc), sleep=lambda s: None)
    yield env
    env.close()


@pytest.fixture
def shop_graph():
    return load_page_graph(FIXTURES / "shop.yaml")


class _QuietHandler(SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


@pytest.fixture(scope="session")
def site_url():
    """Serves tests/fixtures/site on a free local port."""
    handler = functools.partial(_QuietHandler, directory=str(FIXTURES / "site"))
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


# -- acceptance summary -------------------------------------------------------------

_criteria: dict[str, tuple] = {}


def pytest_runtest_logreport(report):
    info = _criteria.get(report.nodeid)
    if info is None or info[3] == "FAIL":
        return
    if report.when == "call" or report.failed:
        outcome = "PASS" if report.passed else "FAIL"
        _criteria[report.nodeid] = info[:3] + (outcome, info[4] + report.duration)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            number, title, budget = mark.args
            _criteria[item.nodeid] = (number, title, budget, None, 0.0)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, budget, outcome, duration in sorted(_criteria.values()):
        status = outcome or "NOT RUN"
        terminalreporter.write_line(f"criterion {number}: {status:7} {title} ({duration:.2f}s, budget {budget}s)")
