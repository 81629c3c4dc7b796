from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from smaliloc.behaviors import load_family_table, load_taxonomy, lookup_family
from smaliloc.gateway import Gateway, LlmRequest, MockBackend
from smaliloc.smali import ingest_tree

FIXTURES = Path(__file__).parent / "fixtures"
DEMO = FIXTURES / "demo_app"
DEMO_FILTER = ["Lcom/demo/"]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test checks")


_criteria: dict[str, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = next((k for k in report.keywords if k.startswith("criterion::")), None)
    if marker is None:
        return
    _criteria.setdefault(marker.split("::", 1)[1], []).append(report.outcome)


def pytest_collection_modifyitems(items):
    # expose the criterion name as a keyword so the log hook can see it
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            item.keywords[f"criterion::{m.args[0]}"] = True


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _criteria.items():
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture(scope="session")
def demo_corpus():
    return ingest_tree(DEMO, DEMO_FILTER, apk_id="demo-app", family="DemoFamily")


@pytest.fixture(scope="session")
def demo_behaviors(taxonomy):
    return lookup_family(load_family_table(DEMO / "families.yaml"), "DemoFamily", taxonomy)


@pytest.fixture
def mock_gateway():
    def make(**kwargs) -> Gateway:
        return Gateway(MockBackend.from_file(DEMO / "mock.yaml"), **kwargs)

    return make


@pytest.fixture
def chat_server(monkeypatch):
    """Local chat-completions endpoint answering from the demo mock script."""
    backend = MockBackend.from_file(DEMO / "mock.yaml")
    hits = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            hits.append(body["model"])
            text = backend.send(LlmRequest(body["messages"][0]["content"])).text
            payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    monkeypatch.setenv("SMALILOC_API_KEY", "test-key")
    yield f"http://127.0.0.1:{server.server_address[1]}/v1", hits
    server.shutdown()
    server.server_close()
