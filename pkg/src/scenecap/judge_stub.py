"""Offline judge stub speaking the scoring wire protocol.

Rewards are canned: each (summary, candidate) pair hashes to a stable
float in [0, 1], so protocol tests never need a live model behind the
endpoint. Failure modes (bad counts, out-of-range rewards, delays) are
switchable per server instance for exercising client error paths.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def canned_reward(summary: str, candidate: str) -> float:
    digest = hashlib.sha256(f"{summary}\x00{candidate}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2 ** 64


@dataclass
class StubBehavior:
    reward_count_delta: int = 0       # extra/missing rewards in the response
    reward_offset: float = 0.0        # pushes rewards out of [0, 1] when nonzero
    delay_s: float = 0.0              # sleep before answering (timeout tests)
    status_code: int = 200
    fixed_rewards: list | None = None  # overrides hashing entirely
    raw_body: str | None = None        # verbatim response body (malformed JSON)


class _Handler(BaseHTTPRequestHandler):
    server_version = "JudgeStub/1.0"

    def log_message(self, *args):  # keep test output quiet
        pass

    def do_POST(self):
        if self.path != "/judge":
            self.send_error(404)
            return
        behavior: StubBehavior = self.server.behavior  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length).decode("utf-8"))
        self.server.requests.append(body)  # type: ignore[attr-defined]

        if behavior.delay_s:
            time.sleep(behavior.delay_s)

        if behavior.raw_body is not None:
            payload = behavior.raw_body.encode("utf-8")
        else:
            candidates = body.get("candidates", [])
            if behavior.fixed_rewards is not None:
                rewards = list(behavior.fixed_rewards)
            else:
                rewards = [canned_reward(body.get("summary", ""), c)
                           for c in candidates]
            delta = behavior.reward_count_delta
            if delta > 0:
                rewards += [0.5] * delta
            elif delta < 0:
                rewards = rewards[:delta]
            rewards = [r + behavior.reward_offset for r in rewards]
            payload = json.dumps({"rewards": rewards}).encode("utf-8")

        self.send_response(behavior.status_code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


class StubJudgeServer:
    """Threaded HTTP server; use as a context manager in tests."""

    def __init__(self, behavior: StubBehavior | None = None, port: int = 0):
        self.server = ThreadingHTTPServer(("127.0.0.1", port), _Handler)
        self.server.behavior = behavior or StubBehavior()  # type: ignore[attr-defined]
        self.server.requests = []  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def requests(self) -> list:
        return self.server.requests  # type: ignore[attr-defined]

    @property
    def behavior(self) -> StubBehavior:
        return self.server.behavior  # type: ignore[attr-defined]

    @behavior.setter
    def behavior(self, value: StubBehavior) -> None:
        self.server.behavior = value  # type: ignore[attr-defined]

    def __enter__(self) -> "StubJudgeServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


def serve(port: int = 8787) -> None:
    """Run a stub judge in the foreground (Ctrl-C to stop)."""
    with StubJudgeServer(port=port) as stub:
        print(f"judge stub listening on {stub.endpoint}/judge")
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            pass
