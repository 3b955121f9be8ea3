"""An offline stand-in for a chat-completions service.

Known actions (see ``fixtures/replies.json``) get their recorded replies;
any other action gets deterministic template sentences. The stub can be
mounted as an ``httpx`` transport or served over real HTTP.
"""

from __future__ import annotations

import json
import threading
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from typing import Iterable

import httpx

from .taxonomy import DEFAULT_TAXONOMY, AttributeTaxonomy
from .templates import TEMPLATES

_GENERIC = {
    1: "{action} involves a distinctive {attr} that helps identify the action.",
    2: "Visually, the {attr} of {action} is clearly recognizable.",
    3: "A primary characteristic of {action} is its typical {attr}.",
    4: "{action} usually manifests through a consistent {attr}.",
    5: "In context, the {attr} of {action} is a useful cue.",
}


@lru_cache(maxsize=1)
def recorded_replies() -> dict[str, dict[str, str]]:
    text = resources.files(__package__).joinpath("fixtures/replies.json").read_text(encoding="utf-8")
    return json.loads(text)


def _action_of(query: str) -> str:
    first = query.splitlines()[0] if query else ""
    if not first.startswith("Action: "):
        raise ValueError("query has no 'Action:' header")
    return first[len("Action: ") :].strip()


def _template_of(query: str, action: str, taxonomy: AttributeTaxonomy) -> int:
    attr = taxonomy.attributes[0].name
    for tid, tpl in TEMPLATES.items():
        if tpl.render(action, attr) in query:
            return tid
    return 1


class StubLLM:
    """Callable ``httpx`` handler producing chat-completions responses.

    Args:
        fail_actions: actions that always get HTTP 500.
        status_script: statuses returned by the first requests, in order,
            before normal behaviour resumes (e.g. ``[500, 500]``).
        drop_attributes: attribute names omitted from every reply.
    """

    def __init__(
        self,
        taxonomy: AttributeTaxonomy = DEFAULT_TAXONOMY,
        *,
        fail_actions: Iterable[str] = (),
        status_script: Iterable[int] = (),
        drop_attributes: Iterable[str] = (),
        fenced: bool = False,
    ):
        self.taxonomy = taxonomy
        self.fail_actions = set(fail_actions)
        self.status_script = list(status_script)
        self.drop_attributes = set(drop_attributes)
        self.fenced = fenced
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    def reply_for(self, query: str) -> str:
        action = _action_of(query)
        recorded = recorded_replies().get(action)
        if recorded is not None:
            body = {action: {k: v for k, v in recorded.items() if k not in self.drop_attributes}}
        else:
            tid = _template_of(query, action, self.taxonomy)
            body = {
                a.name: _GENERIC[tid].format(action=action, attr=a.name.lower())
                for a in self.taxonomy.attributes
                if a.name not in self.drop_attributes
            }
        text = json.dumps(body, ensure_ascii=False, indent=2)
        if self.fenced:
            return f"Sure, here you go:\n```json\n{text}\n```\n"
        return text

    def handle(self, payload: dict) -> tuple[int, dict]:
        with self._lock:
            self.requests.append(payload)
            scripted = self.status_script.pop(0) if self.status_script else None
        if scripted is not None and scripted != 200:
            return scripted, {"error": {"message": f"scripted {scripted}"}}
        query = payload["messages"][-1]["content"]
        if _action_of(query) in self.fail_actions:
            return 500, {"error": {"message": "stub failure"}}
        content = self.reply_for(query)
        return 200, {
            "id": "stub",
            "object": "chat.completion",
            "model": payload.get("model", "stub"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        }

    def __call__(self, request: httpx.Request) -> httpx.Response:
        status, body = self.handle(json.loads(request.content))
        return httpx.Response(status, json=body)

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


class StubServer:
    """Serve a JSON handler on ``127.0.0.1`` in a background thread.

    ``handler`` maps a decoded request body to ``(status, json_body)``.
    """

    def __init__(self, handler):
        self.handler = handler
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                n = int(self.headers.get("Content-Length", 0))
                status, body = outer.handler(json.loads(self.rfile.read(n)))
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "StubServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()
