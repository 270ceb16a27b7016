"""Inference HTTP service for the clinician toolkit.

Endpoints (JSON over HTTP):
  GET  /health       -> 200 when a model and knowledge base are loaded
  GET  /model/info   -> model configuration, threshold, fusion scalar
  GET  /kb           -> catalog of registered knowledge bases
  POST /kb/select    -> {"name": ...} switches the active knowledge base
  POST /predict      -> one subject (dataset-line schema) -> screening verdict

The loaded model and the active knowledge base form an immutable snapshot;
predictions never mutate state and knowledge-base switches swap the snapshot
atomically, so in-flight requests finish on the snapshot they started with.
Responses never contain stored embeddings, and neighbor identifiers are
anonymized by stable hashing.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from .gat import GatModel
from .kb import KnowledgeBase
from .pipeline import predict_subject
from .records import DataError, EMBEDDING_DIM
from .records import _record_from_json_dict  # dataset-line schema, one subject
from .retrieval import RetrievalConfig

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json; charset=utf-8",
    ".json": "application/json; charset=utf-8",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


def anonymize_id(subject_id: str) -> str:
    """Stable one-way pseudonym for a knowledge-base subject id."""
    return hashlib.sha256(subject_id.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class _Snapshot:
    model: GatModel
    kb_name: str
    kb: KnowledgeBase


class ApiError(Exception):
    def __init__(self, status: int, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.status = status
        self.message = message
        self.field = field


class ScreeningService:
    """Holds the model, registered knowledge bases, and the active snapshot."""

    def __init__(
        self,
        model: Optional[GatModel],
        kbs: dict[str, KnowledgeBase],
        retrieval: Optional[RetrievalConfig] = None,
        static_dir: Optional[str] = None,
        default_kb: Optional[str] = None,
    ):
        self.retrieval = retrieval if retrieval is not None else RetrievalConfig()
        self._kbs = dict(kbs)
        self._lock = threading.Lock()
        self._snapshot: Optional[_Snapshot] = None
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        if model is not None and self._kbs:
            name = default_kb if default_kb is not None else sorted(self._kbs)[0]
            if name not in self._kbs:
                raise DataError(f"unknown default knowledge base {name!r}")
            self._snapshot = _Snapshot(model=model, kb_name=name, kb=self._kbs[name])

    # -- state ------------------------------------------------------------

    @property
    def ready(self) -> bool:
        return self._snapshot is not None

    def snapshot(self) -> _Snapshot:
        snap = self._snapshot
        if snap is None:
            raise ApiError(503, "no model loaded")
        return snap

    def select_kb(self, name: str) -> _Snapshot:
        with self._lock:
            if name not in self._kbs:
                raise ApiError(404, f"unknown knowledge base {name!r}", field="name")
            if self._snapshot is None:
                raise ApiError(503, "no model loaded")
            snap = _Snapshot(model=self._snapshot.model, kb_name=name, kb=self._kbs[name])
            self._snapshot = snap  # atomic swap; readers keep their reference
            return snap

    # -- handlers ----------------------------------------------------------

    def handle_health(self) -> tuple[int, dict]:
        if not self.ready:
            return 503, {"status": "loading", "ready": False}
        return 200, {"status": "ok", "ready": True}

    def handle_model_info(self) -> tuple[int, dict]:
        snap = self.snapshot()
        model = snap.model
        return 200, {
            "config": {
                "in_dim": model.config.in_dim,
                "n_layers": model.config.n_layers,
                "heads": model.config.heads,
                "head_dim": model.config.head_dim,
                "dropout": model.config.dropout,
                "fusion_space": model.config.fusion_space,
            },
            "threshold": model.threshold,
            "alpha_reg": model.alpha_reg,
            "seed": model.seed,
            "kb": {"name": snap.kb_name, "count": len(snap.kb), "metric": snap.kb.metric},
            "retrieval": {
                "k": self.retrieval.k,
                "tau_class": self.retrieval.tau_class,
                "gamma": self.retrieval.gamma,
                "tau_reg": self.retrieval.tau_reg,
            },
        }

    def handle_kb_list(self) -> tuple[int, dict]:
        active = self._snapshot.kb_name if self._snapshot is not None else None
        catalog = [
            {"name": name, "count": len(kb), "metric": kb.metric, "active": name == active}
            for name, kb in sorted(self._kbs.items())
        ]
        return 200, {"knowledge_bases": catalog, "active": active}

    def handle_kb_select(self, body: dict) -> tuple[int, dict]:
        name = body.get("name")
        if not isinstance(name, str) or not name:
            raise ApiError(400, "name must be a nonempty string", field="name")
        snap = self.select_kb(name)
        return 200, {"active": snap.kb_name, "count": len(snap.kb)}

    def handle_predict(self, body: dict) -> tuple[int, dict]:
        snap = self.snapshot()
        started = time.perf_counter()
        record = self._parse_subject(body)
        result = predict_subject(snap.model, snap.kb, self.retrieval, record)
        payload = result.to_dict()
        payload["neighbors"] = [
            {
                "subject_id": anonymize_id(n.subject_id),
                "distance": n.distance,
                "has_class_label": n.has_class_label,
                "has_anthro": n.has_anthro,
            }
            for n in result.neighbors
        ]
        payload["kb_name"] = snap.kb_name
        payload["timing_ms"] = (time.perf_counter() - started) * 1000.0
        return 200, payload

    def serve_forever(self, host: str = "127.0.0.1", port: int = 8787) -> None:
        make_server(self, host, port).serve_forever()

    @staticmethod
    def _parse_subject(body: dict):
        if not isinstance(body, dict):
            raise ApiError(400, "request body must be a JSON object")
        poses = body.get("poses")
        if isinstance(poses, dict):
            for key, vec in poses.items():
                if isinstance(vec, list) and len(vec) != EMBEDDING_DIM:
                    raise ApiError(
                        422,
                        f"pose {key} has {len(vec)} entries, expected {EMBEDDING_DIM}",
                        field=f"poses.{key}",
                    )
        try:
            return _record_from_json_dict(body, line_no=1)
        except DataError as exc:
            message = str(exc)
            if message.startswith("line 1: "):
                message = message[len("line 1: ") :]
            field = None
            if "age_months" in message:
                field = "age_months"
                message = "age_months must be positive"
            raise ApiError(400, message, field=field) from None


class _Handler(BaseHTTPRequestHandler):
    service: ScreeningService  # assigned by make_server

    # -- plumbing ----------------------------------------------------------

    def log_message(self, format, *args):  # noqa: A002 - BaseHTTPRequestHandler API
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, exc: ApiError) -> None:
        payload = {"code": exc.status, "message": exc.message}
        if exc.field:
            payload["field"] = exc.field
        self._send_json(exc.status, payload)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise ApiError(400, "empty request body")
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ApiError(400, f"malformed JSON body: {e}") from None

    # -- routes ------------------------------------------------------------

    def do_GET(self):
        try:
            if self.path == "/health":
                status, payload = self.service.handle_health()
            elif self.path == "/model/info":
                status, payload = self.service.handle_model_info()
            elif self.path == "/kb":
                status, payload = self.service.handle_kb_list()
            else:
                return self._serve_static()
            self._send_json(status, payload)
        except ApiError as exc:
            self._send_error(exc)

    def do_POST(self):
        try:
            body = self._read_body()
            if self.path == "/kb/select":
                status, payload = self.service.handle_kb_select(body)
            elif self.path == "/predict":
                status, payload = self.service.handle_predict(body)
            else:
                raise ApiError(404, f"no such endpoint {self.path}")
            self._send_json(status, payload)
        except ApiError as exc:
            self._send_error(exc)

    def _serve_static(self):
        root = self.service.static_dir
        if root is None:
            return self._send_error(ApiError(404, f"no such endpoint {self.path}"))
        rel = self.path.lstrip("/") or "index.html"
        target = (root / rel.split("?", 1)[0]).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            if (root / "index.html").is_file() and "." not in rel:
                target = root / "index.html"  # single-page app fallback
            else:
                return self._send_error(ApiError(404, "not found"))
        body = target.read_bytes()
        self.send_response(200)
        self.send_header(
            "Content-Type", _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        )
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_server(service: ScreeningService, host: str = "127.0.0.1", port: int = 8787):
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)
