import json
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def derived():
    return json.loads((FIXTURES / "derived.json").read_text())


def canned(name: str) -> dict:
    return json.loads((FIXTURES / "stub" / name).read_text())


class StubChat:
    """Local chat-completions endpoint answering from canned fixture files.

    ``script`` is a list consumed in order; each item is a fixture file name,
    an int HTTP status, or a callable(request_json) -> (status, body).
    When the script runs out, ``default`` is served.
    """

    def __init__(self):
        self.script: list = []
        self.default = "generate_ok.json"
        self.requests: list[dict] = []
        self.delay = 0.0
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                with stub.lock:
                    stub.active += 1
                    stub.peak = max(stub.peak, stub.active)
                try:
                    body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                    with stub.lock:
                        stub.requests.append({"path": self.path, "headers": dict(self.headers), "body": body})
                        item = stub.script.pop(0) if stub.script else stub.default
                    if stub.delay:
                        time.sleep(stub.delay)
                    if callable(item):
                        status, payload = item(body)
                    elif isinstance(item, int):
                        status, payload = item, {"error": {"message": "stub error"}}
                    else:
                        status, payload = 200, canned(item)
                    data = json.dumps(payload).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                finally:
                    with stub.lock:
                        stub.active -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_chat(monkeypatch):
    monkeypatch.setenv("ROESL_API_KEY", "test-token")
    stub = StubChat()
    yield stub
    stub.close()
