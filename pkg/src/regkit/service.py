"""Retrieval service: a small JSON-over-HTTP front for :func:`answer_retrieve`.

Endpoints:
    GET  /health  -> {"status": "ok"}
    POST /query   -> body {"question": str, "k": int?, "rerank": bool?}
                     response: the retrieval answer as JSON

Requests are validated before touching the index; malformed bodies get a
400 with a reason. The server threads requests, which is safe because
searches never mutate the index (many readers, no writer while serving).
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .embedding import EmbeddingProvider
from .errors import RegkitError
from .harness import answer_retrieve
from .rerank import ScorerContract

logger = logging.getLogger(__name__)

DEFAULT_K = 5


class RetrievalService:
    """Owns the HTTP server; start() binds, shutdown() stops it gracefully."""

    def __init__(
        self,
        index,
        embedder: EmbeddingProvider,
        scorer: Optional[ScorerContract] = None,
        host: str = "127.0.0.1",
        port: int = 8080,
    ):
        self.index = index
        self.embedder = embedder
        self.scorer = scorer
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # route through logging, not stderr
                logger.debug("http: " + fmt, *args)

            def do_GET(self):
                if self.path == "/health":
                    _send(self, 200, {"status": "ok"})
                else:
                    _send(self, 404, {"error": "not found"})

            def do_POST(self):
                if self.path != "/query":
                    _send(self, 404, {"error": "not found"})
                    return
                length = int(self.headers.get("Content-Length", "0"))
                body = self.rfile.read(length)
                try:
                    payload = _parse_query(body)
                except ValueError as exc:
                    _send(self, 400, {"error": str(exc)})
                    return
                try:
                    answer = answer_retrieve(
                        payload["question"],
                        payload["k"],
                        payload["rerank"],
                        service.index,
                        service.embedder,
                        scorer=service.scorer,
                    )
                except (RegkitError, ValueError) as exc:
                    _send(self, 422, {"error": str(exc)})
                    return
                _send(self, 200, answer.as_dict())

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        logger.info("retrieval service listening on %s", self.address)

    def serve_forever(self) -> None:
        logger.info("retrieval service listening on %s", self.address)
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "RetrievalService":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()


def _parse_query(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed JSON body: {exc}")
    if not isinstance(obj, dict):
        raise ValueError("body must be a JSON object")
    question = obj.get("question")
    if not isinstance(question, str) or not question.strip():
        raise ValueError("'question' must be a non-empty string")
    k = obj.get("k", DEFAULT_K)
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ValueError("'k' must be a positive integer")
    rerank = obj.get("rerank", False)
    if not isinstance(rerank, bool):
        raise ValueError("'rerank' must be a boolean")
    return {"question": question, "k": k, "rerank": rerank}


def _send(handler: BaseHTTPRequestHandler, status: int, payload: dict) -> None:
    data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
    handler.send_response(status)
    handler.send_header("Content-Type", "application/json; charset=utf-8")
    handler.send_header("Content-Length", str(len(data)))
    handler.end_headers()
    handler.wfile.write(data)


def serve_retrieval(
    index,
    embedder: EmbeddingProvider,
    scorer: Optional[ScorerContract] = None,
    host: str = "127.0.0.1",
    port: int = 8080,
) -> RetrievalService:
    """Build and start a service; caller owns shutdown()."""
    service = RetrievalService(index, embedder, scorer=scorer, host=host, port=port)
    service.start()
    return service
