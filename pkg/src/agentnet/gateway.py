"""Chat-completion gateway: the only module that touches the network.

Speaks the common chat-completion message-array protocol, retries
transient failures with exponential backoff, and keeps a global call
ledger. Every network attempt (including failed retries) counts in the
ledger; logical calls (successes) are tracked separately because cost
accounting and the efficiency metric need different numbers.

A record/replay fixture directory allows fully offline runs: requests are
keyed by a hash of their payload and answered from canned responses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import requests

from .errors import ConfigError, GatewayError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str = "http://localhost:8000/v1/chat/completions"
    api_key_env: str = "AGENTNET_API_KEY"
    model_name: str = "gpt-3.5-turbo"
    request_timeout: float = 60.0
    max_retries: int = 2
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be > 0")


@dataclass
class CallLedger:
    """Attempt-level accounting. ``total_calls`` counts network attempts;
    ``logical_calls`` counts successful round trips."""

    total_calls: int = 0
    logical_calls: int = 0
    per_agent_calls: Dict[int, int] = field(default_factory=dict)
    per_query_calls: Dict[str, int] = field(default_factory=dict)

    def copy(self) -> "CallLedger":
        return CallLedger(
            total_calls=self.total_calls,
            logical_calls=self.logical_calls,
            per_agent_calls=dict(self.per_agent_calls),
            per_query_calls=dict(self.per_query_calls),
        )


_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class ChatGateway:
    """Thread-safe client for one chat-completion endpoint."""

    def __init__(self, config: GatewayConfig,
                 fixture_dir: Optional[str] = None,
                 offline: bool = False,
                 record: bool = False,
                 session: Optional[requests.Session] = None):
        self.config = config
        self.fixture_dir = Path(fixture_dir) if fixture_dir else None
        self.offline = offline
        self.record = record
        self._session = session or requests.Session()
        self._ledger = CallLedger()
        self._lock = threading.Lock()
        if offline and self.fixture_dir is None:
            raise ConfigError("offline mode requires a fixture directory")

    # -- ledger -------------------------------------------------------------

    def ledger_snapshot(self) -> CallLedger:
        with self._lock:
            return self._ledger.copy()

    def _count(self, agent_id: Optional[int], query_id: Optional[str],
               success: bool) -> None:
        with self._lock:
            self._ledger.total_calls += 1
            if success:
                self._ledger.logical_calls += 1
            if agent_id is not None:
                self._ledger.per_agent_calls[agent_id] = (
                    self._ledger.per_agent_calls.get(agent_id, 0) + 1
                )
            if query_id is not None:
                self._ledger.per_query_calls[query_id] = (
                    self._ledger.per_query_calls.get(query_id, 0) + 1
                )

    # -- request plumbing ---------------------------------------------------

    def _payload(self, system_text: str, user_text: str,
                 temperature: float, max_tokens: int) -> dict:
        messages = []
        if system_text:
            messages.append({"role": "system", "content": system_text})
        messages.append({"role": "user", "content": user_text})
        return {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }

    @staticmethod
    def _fixture_key(payload: dict) -> str:
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def _replay(self, key: str) -> Optional[str]:
        if self.fixture_dir is None:
            return None
        path = self.fixture_dir / f"{key}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())["response"]

    def _store(self, key: str, payload: dict, response: str) -> None:
        if self.fixture_dir is None:
            return
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        path = self.fixture_dir / f"{key}.json"
        path.write_text(json.dumps(
            {"request": payload, "response": response}, indent=2
        ))

    # -- public API ---------------------------------------------------------

    def chat(self, system_text: str, user_text: str,
             temperature: float = 0.0, max_tokens: int = 1024,
             agent_id: Optional[int] = None,
             query_id: Optional[str] = None) -> str:
        payload = self._payload(system_text, user_text, temperature, max_tokens)
        key = self._fixture_key(payload)

        if self.fixture_dir is not None:
            canned = self._replay(key)
            if canned is not None:
                self._count(agent_id, query_id, success=True)
                return canned
            if self.offline:
                raise GatewayError(f"no fixture for request {key} in offline mode")

        api_key = os.environ.get(self.config.api_key_env)
        if not api_key:
            raise ConfigError(
                f"environment variable {self.config.api_key_env} is not set"
            )
        headers = {"Authorization": f"Bearer {api_key}"}

        last_error: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                time.sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    self.config.endpoint_url, json=payload, headers=headers,
                    timeout=self.config.request_timeout,
                )
            except requests.RequestException as exc:
                self._count(agent_id, query_id, success=False)
                last_error = exc
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                self._count(agent_id, query_id, success=False)
                last_error = GatewayError(
                    f"status {resp.status_code}", status=resp.status_code
                )
                continue
            if resp.status_code != 200:
                self._count(agent_id, query_id, success=False)
                raise GatewayError(
                    f"non-retryable status {resp.status_code}",
                    status=resp.status_code,
                )
            self._count(agent_id, query_id, success=True)
            text = resp.json()["choices"][0]["message"]["content"]
            if self.record:
                self._store(key, payload, text)
            return text

        raise GatewayError(
            f"exhausted {self.config.max_retries + 1} attempts: {last_error}",
            status=getattr(last_error, "status", None),
        )
