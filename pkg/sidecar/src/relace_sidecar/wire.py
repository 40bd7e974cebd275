"""Scorer wire protocol, implemented independently against the published contract.

Request:  {"request_id": str, "query": str, "passages": [str, ...]}
Response: {"request_id": str, "scores": [float, ...]}
Canonical encoding is UTF-8 JSON with sorted keys and compact separators.
The scores array must match the passages array in length; anything else is
a protocol error. Golden fixtures live in the repository's
``fixtures/scorer_wire/`` directory and must round-trip byte-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Tuple


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class ScoreRequest:
    request_id: str
    query: str
    passages: Tuple[str, ...]


@dataclass(frozen=True)
class ScoreResponse:
    request_id: str
    scores: Tuple[float, ...]


def _canonical(obj) -> bytes:
    return json.dumps(
        obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")


def encode_request(request: ScoreRequest) -> bytes:
    return _canonical(
        {
            "request_id": request.request_id,
            "query": request.query,
            "passages": list(request.passages),
        }
    )


def decode_request(data: bytes) -> ScoreRequest:
    obj = _parse(data)
    request_id = obj.get("request_id")
    query = obj.get("query")
    passages = obj.get("passages")
    if not isinstance(request_id, str) or not isinstance(query, str):
        raise ProtocolError("request_id and query must be strings")
    if (
        not isinstance(passages, list)
        or not passages
        or not all(isinstance(p, str) for p in passages)
    ):
        raise ProtocolError("passages must be a non-empty list of strings")
    return ScoreRequest(request_id=request_id, query=query, passages=tuple(passages))


def encode_response(response: ScoreResponse) -> bytes:
    return _canonical(
        {"request_id": response.request_id, "scores": list(response.scores)}
    )


def decode_response(data: bytes) -> ScoreResponse:
    obj = _parse(data)
    request_id = obj.get("request_id")
    scores = obj.get("scores")
    if not isinstance(request_id, str):
        raise ProtocolError("request_id must be a string")
    if not isinstance(scores, list) or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
    ):
        raise ProtocolError("scores must be a list of numbers")
    values = tuple(float(s) for s in scores)
    if not all(math.isfinite(v) for v in values):
        raise ProtocolError("scores must be finite")
    return ScoreResponse(request_id=request_id, scores=values)


def _parse(data: bytes) -> dict:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("payload must be a JSON object")
    return obj
