"""HTTP binding: `/v1/*` data plane plus `/admin/*` control plane.

Bodies are exactly the canonical protocol JSON. Score responses carry the
`x-modelgate-served-by`, `x-modelgate-rule`, and `x-modelgate-decision-id`
headers so callers can audit routing without parsing the body.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

from .control_plane import AdminApi, UnknownEscalation
from .protocol import (
    InvariantViolation,
    MessageKind,
    ParseError,
    ProtocolError,
    SchemaError,
    decode_message,
    encode_message,
)
from .registry import DuplicateVersion, IllegalTransition, LineageViolation, NoChampion, UnknownModel
from .router import AllBackendsFailed, Gateway, UnknownRequest

_CORS_HEADERS = {
    "access-control-allow-origin": "*",
    "access-control-allow-methods": "GET, POST, PUT, OPTIONS",
    "access-control-allow-headers": "authorization, content-type, x-modelgate-actor",
}


class ModelGateServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, gateway: Gateway, admin: AdminApi) -> None:
        super().__init__(address, _Handler)
        self.gateway = gateway
        self.admin = admin

    @property
    def port(self) -> int:
        return self.server_address[1]


class _Handler(BaseHTTPRequestHandler):
    server: ModelGateServer

    def log_message(self, fmt: str, *args) -> None:  # keep test output quiet
        pass

    def _read_body(self) -> bytes:
        length = int(self.headers.get("content-length", "0") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, payload: bytes, content_type: str = "application/json",
              extra_headers: dict[str, str] | None = None) -> None:
        self.send_response(status)
        self.send_header("content-type", content_type)
        self.send_header("content-length", str(len(payload)))
        for key, value in _CORS_HEADERS.items():
            self.send_header(key, value)
        for key, value in (extra_headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, status: int, obj, extra_headers: dict[str, str] | None = None) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"), extra_headers=extra_headers)

    def do_OPTIONS(self) -> None:  # CORS preflight for the console
        self._send(204, b"")

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_PUT(self) -> None:
        self._dispatch("PUT")

    def _dispatch(self, method: str) -> None:
        split = urlsplit(self.path)
        path = split.path
        query = dict(parse_qsl(split.query))
        try:
            if path.startswith("/admin"):
                body_bytes = self._read_body()
                body = json.loads(body_bytes) if body_bytes else {}
                status, payload = self.server.admin.handle(
                    method, path, query=query, body=body, headers=dict(self.headers.items())
                )
                self._send_json(status, payload)
                return
            if method == "POST" and path == "/v1/score":
                self._handle_score()
                return
            if method == "POST" and path == "/v1/feedback":
                record = decode_message(MessageKind.FEEDBACK, self._read_body())
                ack = self.server.gateway.handle_feedback(record)
                self._send_json(200, ack)
                return
            if method == "POST" and path == "/v1/notify":
                notification = decode_message(MessageKind.NOTIFICATION, self._read_body())
                ack = self.server.gateway.handle_notify(notification)
                self._send_json(200, ack)
                return
            self._send_json(404, {"error": "not_found", "detail": path})
        except json.JSONDecodeError as exc:
            self._send_json(400, {"error": "ParseError", "detail": str(exc)})
        except (ParseError, SchemaError, InvariantViolation) as exc:
            self._send_json(400, {"error": type(exc).__name__, "detail": str(exc)})
        except (UnknownRequest, UnknownModel, UnknownEscalation) as exc:
            self._send_json(404, {"error": type(exc).__name__, "detail": str(exc)})
        except (DuplicateVersion, LineageViolation, IllegalTransition) as exc:
            self._send_json(409, {"error": type(exc).__name__, "detail": str(exc)})
        except NoChampion as exc:
            self._send_json(503, {"error": "NoChampion", "detail": str(exc)})
        except AllBackendsFailed as exc:
            self._send_json(502, {"error": "AllBackendsFailed", "detail": str(exc)})
        except ProtocolError as exc:
            self._send_json(400, {"error": type(exc).__name__, "detail": str(exc)})

    def _handle_score(self) -> None:
        request = decode_message(MessageKind.SCORE_REQUEST, self._read_body())
        response, info = self.server.gateway.handle_score(request)
        self._send(
            200,
            encode_message(response),
            extra_headers={
                "x-modelgate-served-by": response.served_by.render(),
                "x-modelgate-rule": info.rule,
                "x-modelgate-decision-id": info.decision_id,
            },
        )


def start_server(gateway: Gateway, admin: AdminApi, host: str = "127.0.0.1", port: int = 0) -> ModelGateServer:
    """Start serving on a daemon thread; call `shutdown()` when done."""
    server = ModelGateServer((host, port), gateway, admin)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
