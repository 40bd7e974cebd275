"""Serve cross-encoder scores over the wire protocol.

POST /score takes a protocol request and returns one score per passage.
Inference is deterministic (eval mode, no dropout): identical requests get
identical scores. One request is processed at a time; the scorer client
contract does not pipeline.
"""

from __future__ import annotations

import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from typing import Optional

from .model import CrossEncoder
from .wire import ProtocolError, ScoreResponse, decode_request, encode_response

logger = logging.getLogger(__name__)


class ScoringService:
    def __init__(self, encoder: CrossEncoder, host: str = "127.0.0.1", port: int = 8091):
        self.encoder = encoder
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug("http: " + fmt, *args)

            def do_GET(self):
                if self.path == "/health":
                    _send(self, 200, b'{"status":"ok"}')
                else:
                    _send(self, 404, b'{"error":"not found"}')

            def do_POST(self):
                if self.path != "/score":
                    _send(self, 404, b'{"error":"not found"}')
                    return
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                try:
                    request = decode_request(raw)
                except ProtocolError as exc:
                    _send(self, 400, f'{{"error":{_json_str(str(exc))}}}'.encode())
                    return
                scores = service.encoder.score(request.query, request.passages)
                body = encode_response(
                    ScoreResponse(request_id=request.request_id, scores=tuple(scores))
                )
                _send(self, 200, body)

        # single worker: requests are handled one at a time by contract
        self._server = HTTPServer((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        logger.info("scoring service listening on %s", self.address)

    def serve_forever(self) -> None:
        logger.info("scoring service listening on %s", self.address)
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ScoringService":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()


def _send(handler: BaseHTTPRequestHandler, status: int, body: bytes) -> None:
    handler.send_response(status)
    handler.send_header("Content-Type", "application/json; charset=utf-8")
    handler.send_header("Content-Length", str(len(body)))
    handler.end_headers()
    handler.wfile.write(body)


def _json_str(text: str) -> str:
    import json

    return json.dumps(text, ensure_ascii=False)


def serve_scores(checkpoint: str, host: str = "127.0.0.1", port: int = 8091,
                 max_tokens: int = 512) -> ScoringService:
    """Load a checkpoint and start serving; caller owns shutdown()."""
    encoder = CrossEncoder(checkpoint, max_tokens=max_tokens)
    service = ScoringService(encoder, host=host, port=port)
    service.start()
    return service
