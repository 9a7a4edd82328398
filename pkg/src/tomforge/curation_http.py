"""JSON-over-HTTP façade for the review service, stdlib only.

Bearer tokens come from a roster file::

    {"annotators": [{"id": "alice", "token": "tok-alice", "expert": false}]}

Endpoints (all JSON, all requiring ``Authorization: Bearer <token>``):

* ``GET /queue?size=&kind=&topic=&polarity=`` claims a batch for the caller
* ``GET /flagged`` lists items awaiting expert resolution
* ``GET /stats`` review progress counters
* ``POST /decisions`` body ``{"item", "verdict", "text"?, "reason"?}``
* ``POST /expert/resolve`` body ``{"item", "verdict", "relabel"?, "text"?}``
* ``POST /claims/release`` drops the caller's live leases
* ``POST /finalize`` body ``{"force"?}``; writes the graph when an output
  directory was configured

Responses carry permissive CORS headers so a browser UI served from
anywhere can talk to a local review server.
"""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from . import graph_store
from .chain_model import NodeKind, Polarity, Topic, normalize_emotion
from .construction_pipeline import Candidate
from .curation import CurationService, ReviewVerdict
from .errors import (
    ConfigError,
    DecisionInvalid,
    LabelPolarityMismatch,
    NotFlagged,
    PendingItemsRemain,
    RoleDenied,
    StaleClaim,
    TomforgeError,
    UnknownAnnotator,
    UnknownItem,
)

log = logging.getLogger(__name__)

_STATUS_OF = {
    UnknownItem: 404,
    UnknownAnnotator: 404,
    StaleClaim: 409,
    PendingItemsRemain: 409,
    RoleDenied: 403,
    NotFlagged: 400,
    DecisionInvalid: 400,
    LabelPolarityMismatch: 400,
}


def load_roster(path: str) -> tuple[dict[str, bool], dict[str, str]]:
    """Parse a roster file into (id -> expert flag, token -> id)."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"roster {path} is not valid JSON: {exc.msg}") from None
    annotators = data.get("annotators") if isinstance(data, dict) else None
    if not isinstance(annotators, list) or not annotators:
        raise ConfigError(f"roster {path} needs a non-empty 'annotators' list")
    roster: dict[str, bool] = {}
    tokens: dict[str, str] = {}
    for entry in annotators:
        annotator_id = entry.get("id") if isinstance(entry, dict) else None
        token = entry.get("token") if isinstance(entry, dict) else None
        if not annotator_id or not token:
            raise ConfigError("every roster entry needs an id and a token")
        if token in tokens:
            raise ConfigError(f"token for {annotator_id!r} is already in use")
        roster[annotator_id] = bool(entry.get("expert", False))
        tokens[token] = annotator_id
    return roster, tokens


def _candidate_payload(candidate: Candidate) -> dict:
    return {
        "id": candidate.id,
        "kind": candidate.kind.value,
        "text": candidate.text,
        "polarity": candidate.polarity.value if candidate.polarity else None,
        "topic": candidate.topic.value if candidate.topic else None,
        "status": candidate.status.value,
        "source": candidate.source,
    }


class _Handler(BaseHTTPRequestHandler):
    # subclassed per server with these filled in
    service: CurationService = None
    tokens: dict[str, str] = {}
    out_dir: Optional[str] = None

    server_version = "tomforge-curation/0.1"
    protocol_version = "HTTP/1.1"

    def log_message(self, format, *args):
        log.debug("%s - %s", self.address_string(), format % args)

    # -- plumbing ----------------------------------------------------------

    def _cors(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Authorization, Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")

    def _reply(self, status: int, payload: dict):
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)

    def _fail(self, status: int, error_type: str, message: str):
        self._reply(status, {"error": {"type": error_type, "message": message}})

    def _caller(self) -> Optional[str]:
        header = self.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            self._fail(401, "Unauthorized", "missing bearer token")
            return None
        annotator_id = self.tokens.get(header[len("Bearer "):].strip())
        if annotator_id is None:
            self._fail(401, "Unauthorized", "unknown token")
            return None
        return annotator_id

    def _body(self) -> Optional[dict]:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            data = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            self._fail(400, "BadRequest", "request body is not valid JSON")
            return None
        if not isinstance(data, dict):
            self._fail(400, "BadRequest", "request body must be a JSON object")
            return None
        return data

    def _dispatch(self, handler, *args):
        try:
            handler(*args)
        except TomforgeError as exc:
            self._fail(_STATUS_OF.get(type(exc), 400), type(exc).__name__, str(exc))
        except (ValueError, KeyError, TypeError) as exc:
            self._fail(400, "BadRequest", str(exc))

    # -- verbs ---------------------------------------------------------------

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        caller = self._caller()
        if caller is None:
            return
        url = urlparse(self.path)
        if url.path == "/queue":
            self._dispatch(self._get_queue, caller, parse_qs(url.query))
        elif url.path == "/flagged":
            self._dispatch(self._get_flagged)
        elif url.path == "/stats":
            self._dispatch(self._get_stats)
        else:
            self._fail(404, "NotFound", f"no route {url.path}")

    def do_POST(self):
        caller = self._caller()
        if caller is None:
            return
        url = urlparse(self.path)
        body = self._body()
        if body is None:
            return
        if url.path == "/decisions":
            self._dispatch(self._post_decision, caller, body)
        elif url.path == "/expert/resolve":
            self._dispatch(self._post_resolve, caller, body)
        elif url.path == "/claims/release":
            self._dispatch(self._post_release, caller)
        elif url.path == "/finalize":
            self._dispatch(self._post_finalize, body)
        else:
            self._fail(404, "NotFound", f"no route {url.path}")

    # -- routes --------------------------------------------------------------

    @staticmethod
    def _first(params: dict, name: str) -> Optional[str]:
        values = params.get(name)
        return values[0] if values else None

    def _get_queue(self, caller: str, params: dict):
        size = int(self._first(params, "size") or 20)
        kind = self._first(params, "kind")
        topic = self._first(params, "topic")
        polarity = self._first(params, "polarity")
        items = self.service.claim_batch(
            caller, size=size,
            kind=NodeKind(kind) if kind else None,
            topic=Topic(topic) if topic else None,
            polarity=Polarity(polarity) if polarity else None)
        self._reply(200, {"items": [item.to_dict() for item in items]})

    def _get_flagged(self):
        items = self.service.flagged_items()
        self._reply(200, {"items": [item.to_dict() for item in items]})

    def _get_stats(self):
        self._reply(200, self.service.stats().to_dict())

    def _post_decision(self, caller: str, body: dict):
        item_id = body.get("item") or ""
        verdict = ReviewVerdict(body.get("verdict"))
        updated = self.service.submit_decision(
            item_id, caller, verdict,
            text=body.get("text"), reason=body.get("reason"))
        self._reply(200, {"item": _candidate_payload(updated)})

    def _post_resolve(self, caller: str, body: dict):
        item_id = body.get("item") or ""
        verdict = ReviewVerdict(body.get("verdict"))
        relabel = body.get("relabel")
        updated = self.service.expert_resolve(
            item_id, caller, verdict,
            relabel=normalize_emotion(relabel) if relabel else None,
            text=body.get("text"))
        self._reply(200, {"item": _candidate_payload(updated)})

    def _post_release(self, caller: str):
        released = self.service.release_claims(caller)
        self._reply(200, {"released": released})

    def _post_finalize(self, body: dict):
        graph, stats = self.service.finalize(force=bool(body.get("force")))
        written_to = None
        if self.out_dir:
            graph_store.save(graph, self.out_dir)
            written_to = self.out_dir
        self._reply(200, {"stats": stats.to_dict(),
                          "nodes": len(graph.nodes),
                          "chains": len(graph.chains),
                          "written_to": written_to})


def make_server(service: CurationService, tokens: dict[str, str],
                host: str = "127.0.0.1", port: int = 0,
                out_dir: Optional[str] = None) -> ThreadingHTTPServer:
    """Build (but do not start) the review server; port 0 picks a free one."""
    handler = type("BoundHandler", (_Handler,),
                   {"service": service, "tokens": dict(tokens), "out_dir": out_dir})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
