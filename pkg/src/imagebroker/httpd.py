"""HTTP front ends for the broker and provider services.

Bodies are the canonical agent encoding on /agents; session endpoints also
speak a documented JSON form (Content-Type / Accept: application/json) that
the web console and the CLI's --format json use. Similarity values in JSON
are fixed 6-decimal strings so clients can display them without reformatting.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import watermark
from .broker import Broker, RetrievalItem
from .errors import (
    AccessDeniedError,
    CapacityError,
    ComparisonError,
    ContractError,
    DecodeError,
    ImageBrokerError,
    InputError,
    NetworkError,
    NotFoundError,
    ParameterError,
    SessionError,
    TrustError,
)
from .images import decode_raster
from .protocol import (
    QUERY_BY_FEATURE,
    QUERY_BY_IMAGE,
    QueryMessage,
    ResultMessage,
    RETRIEVED,
)
from .provider import ProviderNode

_STATUS_FOR = [
    ((DecodeError, InputError, ParameterError, CapacityError, ComparisonError,
      ContractError), 400),
    ((TrustError, AccessDeniedError), 403),
    ((NotFoundError, SessionError), 404),
    ((NetworkError,), 502),
]


def _http_status(exc: ImageBrokerError) -> int:
    for classes, status in _STATUS_FOR:
        if isinstance(exc, classes):
            return status
    return 500


def format_similarity(value: float) -> str:
    return f"{value:.6f}"


def result_to_json(result: ResultMessage) -> dict:
    return {
        "sessionId": result.session_id,
        "status": result.status,
        "results": [
            {
                "providerUrl": d.provider_url,
                "imageId": d.image_id,
                "similarity": format_similarity(d.similarity),
                "thumbnailBase64": base64.b64encode(d.thumbnail).decode("ascii"),
            }
            for d in result.descriptors
        ],
    }


class _Handler(BaseHTTPRequestHandler):
    routes: list[tuple[str, re.Pattern, str]] = []
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # tests stay quiet
        pass

    # --- plumbing -------------------------------------------------------

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _wants_json(self) -> bool:
        accept = self.headers.get("Accept", "")
        ctype = self.headers.get("Content-Type", "")
        return "application/json" in accept or "application/json" in ctype

    def _send(self, status: int, content_type: str, payload: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type, Accept")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, status: int, obj) -> None:
        self._send(status, "application/json", json.dumps(obj).encode("utf-8"))

    def _send_error_json(self, exc: ImageBrokerError) -> None:
        self._send_json(_http_status(exc), {
            "error": type(exc).__name__,
            "message": str(exc),
        })

    def _dispatch(self, method: str) -> None:
        for route_method, pattern, attr in self.routes:
            if route_method != method:
                continue
            match = pattern.fullmatch(self.path.split("?")[0])
            if match:
                try:
                    getattr(self, attr)(*match.groups())
                except ImageBrokerError as exc:
                    self._send_error_json(exc)
                except Exception as exc:  # pragma: no cover - defensive
                    self._send_json(500, {"error": "internal", "message": str(exc)})
                return
        self._send_json(404, {"error": "NotFoundError", "message": "no such endpoint"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_OPTIONS(self):
        self._send(204, "text/plain", b"")


class BrokerHandler(_Handler):
    broker: Broker = None  # set by serve_broker

    routes = [
        ("POST", re.compile(r"/agents"), "post_agents"),
        ("POST", re.compile(r"/sessions/([0-9a-f-]+)/query"), "post_query"),
        ("GET", re.compile(r"/sessions/([0-9a-f-]+)/result"), "get_result"),
        ("POST", re.compile(r"/sessions/([0-9a-f-]+)/retrieve"), "post_retrieve"),
        ("POST", re.compile(r"/admin/reindex"), "post_reindex"),
        ("POST", re.compile(r"/watermark/extract"), "post_extract"),
    ]

    def post_agents(self):
        reply = self.broker.handle_envelope(self._body())
        self._send(200, "application/octet-stream", reply)

    def _query_from_json(self, session_id: str, body: bytes) -> QueryMessage:
        try:
            raw = json.loads(body)
        except json.JSONDecodeError as exc:
            raise InputError(f"bad JSON body: {exc}") from exc
        k = raw.get("k")
        if k is None:
            k = self.broker.config.default_k
        if "imageBase64" in raw:
            payload_kind = QUERY_BY_IMAGE
            payload = base64.b64decode(raw["imageBase64"])
        elif "featureBase64" in raw:
            payload_kind = QUERY_BY_FEATURE
            payload = base64.b64decode(raw["featureBase64"])
        else:
            raise InputError("query JSON needs imageBase64 or featureBase64")
        return QueryMessage(session_id, payload_kind, payload, int(k))

    def post_query(self, session_id: str):
        body = self._body()
        if self._wants_json():
            result = self.broker.handle_query(self._query_from_json(session_id, body))
            self._send_json(200, result_to_json(result))
            return
        message = QueryMessage.from_bytes(body)
        if message.session_id != session_id:
            raise SessionError("session id in body does not match the path")
        result = self.broker.handle_query(message)
        self._send(200, "application/octet-stream", result.to_bytes())

    def get_result(self, session_id: str):
        transmission = self.broker.deliver_result(session_id)
        if self._wants_json():
            self._send_json(200, result_to_json(transmission.content))
            return
        self._send(200, "application/octet-stream", transmission.data)

    def post_retrieve(self, session_id: str):
        try:
            raw = json.loads(self._body())
            purchaser = raw["purchaserId"]
            items = [
                RetrievalItem(i["providerUrl"], i["imageId"], i.get("licenseToken", ""))
                for i in raw["items"]
            ]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"bad retrieve body: {exc}") from exc
        outcomes = self.broker.create_search_agents(session_id, items, purchaser)
        payload = []
        for item, outcome in zip(items, outcomes):
            entry = {
                "providerUrl": item.provider_url,
                "imageId": outcome.image_id,
                "status": outcome.status,
            }
            if outcome.status == RETRIEVED:
                entry["imageBase64"] = base64.b64encode(outcome.payload).decode("ascii")
            else:
                entry["reason"] = outcome.reason()
            payload.append(entry)
        self._send_json(200, {"items": payload})

    def post_reindex(self):
        report = self.broker.dispatch_index_agents()
        self._send_json(200, {"merged": report.merged, "failures": report.failures})

    def post_extract(self):
        try:
            raw = json.loads(self._body())
            data = base64.b64decode(raw["imageBase64"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad extract body: {exc}") from exc
        identity = watermark.extract(decode_raster(data))
        self._send_json(200, {"identity": identity})


class ProviderHandler(_Handler):
    provider: ProviderNode = None  # set by serve_provider

    routes = [
        ("POST", re.compile(r"/agents"), "post_agents"),
        ("GET", re.compile(r"/images/([^/]+)/thumbnail"), "get_thumbnail"),
        ("POST", re.compile(r"/images/([^/]+)/retrieve"), "post_retrieve"),
    ]

    def post_agents(self):
        reply = self.provider.handle_envelope(self._body())
        self._send(200, "application/octet-stream", reply)

    def get_thumbnail(self, image_id: str):
        self._send(200, "image/png", self.provider.get_thumbnail(image_id))

    def post_retrieve(self, image_id: str):
        try:
            raw = json.loads(self._body())
            token = raw["token"]
            purchaser = raw["purchaserId"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"bad retrieve body: {exc}") from exc
        data = self.provider.retrieve_full(image_id, token, purchaser)
        self._send(200, "image/png", data)


def _serve(handler_cls, host: str, port: int) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), handler_cls)
    server.daemon_threads = True
    return server


def serve_broker(broker: Broker, host: str = "127.0.0.1", port: int = 8440) -> ThreadingHTTPServer:
    handler = type("BoundBrokerHandler", (BrokerHandler,), {"broker": broker})
    return _serve(handler, host, port)


def serve_provider(provider: ProviderNode, host: str = "127.0.0.1",
                   port: int = 8450) -> ThreadingHTTPServer:
    handler = type("BoundProviderHandler", (ProviderHandler,), {"provider": provider})
    return _serve(handler, host, port)


def start_in_background(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
