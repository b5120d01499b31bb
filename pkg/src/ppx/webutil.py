"""Minimal JSON-over-HTTP plumbing shared by the aggregation server and
the proxy's admin listener."""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlparse


class Route:
    def __init__(self, method: str, pattern: str, fn):
        self.method = method
        self.regex = re.compile("^" + pattern + "$")
        self.fn = fn


class JsonApi:
    """Route table mapping (method, path regex) to handler callables.

    Handlers receive (match, query_dict, body_obj) and return
    (status_code, json_payload) or (status_code, bytes, content_type).
    """

    def __init__(self):
        self.routes: list[Route] = []
        self.static_root = None

    def route(self, method: str, pattern: str):
        def register(fn):
            self.routes.append(Route(method, pattern, fn))
            return fn

        return register

    def dispatch(self, method: str, path: str, query: dict, body_obj):
        for route in self.routes:
            if route.method != method:
                continue
            match = route.regex.match(path)
            if match:
                return route.fn(match, query, body_obj)
        return 404, {"error": f"no route for {method} {path}"}


def make_handler(api: JsonApi):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _respond(self, result):
            if len(result) == 3:
                status, payload, content_type = result
            else:
                status, obj = result
                payload = json.dumps(obj).encode("utf-8") if obj is not None else b""
                content_type = "application/json"
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _handle(self, method: str):
            parsed = urlparse(self.path)
            query = dict(parse_qsl(parsed.query, keep_blank_values=True))
            body_obj = None
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                raw = self.rfile.read(length)
                try:
                    body_obj = json.loads(raw)
                except json.JSONDecodeError:
                    self._respond((400, {"error": "body is not valid JSON"}))
                    return
            try:
                result = api.dispatch(method, parsed.path, query, body_obj)
            except Exception as exc:  # surface handler bugs as 500s, keep serving
                result = (500, {"error": f"{type(exc).__name__}: {exc}"})
            self._respond(result)

        def do_GET(self):
            self._handle("GET")

        def do_POST(self):
            self._handle("POST")

        def do_DELETE(self):
            self._handle("DELETE")

    return Handler


class ApiServer:
    """Threaded HTTP server wrapper with clean startup/shutdown."""

    def __init__(self, host: str, port: int, api: JsonApi):
        self.httpd = ThreadingHTTPServer((host, port), make_handler(api))
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self.httpd.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)
