"""Gateway behavior against a local mock chat-completion server."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from agentnet.errors import ConfigError, GatewayError
from agentnet.gateway import ChatGateway, GatewayConfig


class MockHandler(BaseHTTPRequestHandler):
    """Replays a scripted sequence of statuses, then echoes a reply."""

    script = []  # list of status codes to emit before succeeding
    requests_seen = []
    reply = "The answer is (A)."

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        payload = json.loads(self.rfile.read(length))
        type(self).requests_seen.append(payload)
        status = type(self).script.pop(0) if type(self).script else 200
        if status != 200:
            self.send_response(status)
            self.end_headers()
            return
        body = json.dumps({
            "choices": [{"message": {"content": type(self).reply}}]
        }).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    MockHandler.script = []
    MockHandler.requests_seen = []
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), MockHandler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_port}/v1/chat/completions"
    httpd.shutdown()


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("AGENTNET_API_KEY", "test-key")


def make_gateway(url, **kwargs):
    config = GatewayConfig(endpoint_url=url, backoff_base=0.0, **kwargs)
    return ChatGateway(config)


def test_missing_api_key_is_config_error(server):
    gateway = make_gateway(server)
    import os
    assert "AGENTNET_API_KEY" not in os.environ
    with pytest.raises(ConfigError):
        gateway.chat("sys", "user")
    assert gateway.ledger_snapshot().total_calls == 0  # never hit the network


def test_successful_chat_counts_one_call(server, api_key):
    gateway = make_gateway(server)
    reply = gateway.chat("sys", "user", agent_id=3, query_id="q1")
    assert reply == "The answer is (A)."
    ledger = gateway.ledger_snapshot()
    assert ledger.total_calls == 1
    assert ledger.logical_calls == 1
    assert ledger.per_agent_calls == {3: 1}
    assert ledger.per_query_calls == {"q1": 1}
    # payload carries both roles
    roles = [m["role"] for m in MockHandler.requests_seen[0]["messages"]]
    assert roles == ["system", "user"]


def test_retry_counts_every_attempt(server, api_key):
    MockHandler.script = [503, 429]
    gateway = make_gateway(server, max_retries=2)
    reply = gateway.chat("sys", "user", agent_id=1)
    assert reply == "The answer is (A)."
    ledger = gateway.ledger_snapshot()
    assert ledger.total_calls == 3  # two failures + one success
    assert ledger.logical_calls == 1


def test_exhausted_retries_raise(server, api_key):
    MockHandler.script = [500, 500, 500]
    gateway = make_gateway(server, max_retries=2)
    with pytest.raises(GatewayError):
        gateway.chat("sys", "user")
    ledger = gateway.ledger_snapshot()
    assert ledger.total_calls == 3
    assert ledger.logical_calls == 0


def test_non_retryable_status_fails_fast(server, api_key):
    MockHandler.script = [403]
    gateway = make_gateway(server, max_retries=5)
    with pytest.raises(GatewayError) as exc:
        gateway.chat("sys", "user")
    assert exc.value.status == 403
    assert gateway.ledger_snapshot().total_calls == 1


def test_record_then_offline_replay(server, api_key, tmp_path):
    fixtures = tmp_path / "fixtures"
    recording = ChatGateway(
        GatewayConfig(endpoint_url=server, backoff_base=0.0),
        fixture_dir=str(fixtures), record=True,
    )
    live = recording.chat("sys", "hello")
    assert len(list(fixtures.glob("*.json"))) == 1

    offline = ChatGateway(
        GatewayConfig(endpoint_url="http://nowhere.invalid/"),
        fixture_dir=str(fixtures), offline=True,
    )
    assert offline.chat("sys", "hello") == live
    assert offline.ledger_snapshot().logical_calls == 1
    with pytest.raises(GatewayError):
        offline.chat("sys", "unseen prompt")


def test_offline_requires_fixture_dir():
    with pytest.raises(ConfigError):
        ChatGateway(GatewayConfig(), offline=True)


def test_config_validation():
    with pytest.raises(ConfigError):
        GatewayConfig(max_retries=-1)
    with pytest.raises(ConfigError):
        GatewayConfig(request_timeout=0)


def test_ledger_is_thread_safe(server, api_key):
    gateway = make_gateway(server)
    threads = [
        threading.Thread(target=gateway.chat, args=("sys", f"user {i}"))
        for i in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert gateway.ledger_snapshot().total_calls == 8
