import socket
import socketserver
import ssl
import threading

from ppx.http_request import parse_raw
from ppx.simkit import (
    GLOBAL_CONSTANT,
    PER_REQUEST_RANDOM,
    PER_USER_CONSTANT,
    TIMESTAMP,
    ZIPF_SHARED,
    AppSpec,
    EndpointSpec,
    KeySpec,
)


def make_request(
    method="GET",
    path="/api/v1",
    query=None,
    headers=None,
    body=b"",
    app="io.example.app",
    version="1.0",
    host="www.example.io",
):
    """Assemble a ParsedRequest by round-tripping real wire bytes."""
    target = path
    if query:
        target += "?" + "&".join(f"{k}={v}" for k, v in query)
    lines = [f"{method} {target} HTTP/1.1", f"Host: {host}"]
    for name, value in headers or []:
        lines.append(f"{name}: {value}")
    if body:
        lines.append(f"Content-Length: {len(body)}")
    raw = ("\r\n".join(lines) + "\r\n\r\n").encode() + body
    return parse_raw(raw, app=app, app_version=version, timestamp=1_700_000_000_000)


def clean_app_spec():
    """Noise-free spec covering every behavior."""
    return AppSpec(
        package="io.example.app",
        version="1.0",
        endpoints=[
            EndpointSpec(
                method="GET",
                host="api.example.io",
                path="/v1/sync",
                keys=[
                    KeySpec("U:device_id", PER_USER_CONSTANT),
                    KeySpec("U:developer", GLOBAL_CONSTANT),
                    KeySpec("U:nonce", PER_REQUEST_RANDOM),
                ],
            ),
            EndpointSpec(
                method="POST",
                host="api.example.io",
                path="/v1/events",
                keys=[
                    KeySpec("B:meta.install_id", PER_USER_CONSTANT),
                    KeySpec("B:meta.ts", TIMESTAMP),
                    KeySpec("B:item", ZIPF_SHARED),
                    KeySpec("H:X-Api-Key", GLOBAL_CONSTANT),
                ],
            ),
        ],
    )


def noisy_app_spec():
    """Clean spec plus one-shot endpoints and a random path token."""
    spec = clean_app_spec()
    spec.endpoints.append(
        EndpointSpec(
            method="GET",
            host="api.example.io",
            path="/v1/once",
            keys=[KeySpec("U:session_blob", PER_REQUEST_RANDOM)],
            requests_per_round=1,
        )
    )
    spec.endpoints.append(
        EndpointSpec(
            method="GET",
            host="cdn.example.io",
            path="/v1/obj",
            keys=[KeySpec("U:ref", PER_REQUEST_RANDOM)],
            requests_per_round=1,
            random_path_token=True,
        )
    )
    return spec


# -- live test infrastructure: recording origin + proxy-aware clients -----------


def _read_one_request(sock_file) -> bytes | None:
    """Independent minimal reader: head + Content-Length body only."""
    head = b""
    while b"\r\n\r\n" not in head:
        chunk = sock_file.readline()
        if not chunk:
            return None if not head else head
        head += chunk
    length = 0
    for line in head.split(b"\r\n"):
        if line.lower().startswith(b"content-length:"):
            length = int(line.split(b":", 1)[1])
    body = sock_file.read(length) if length else b""
    return head + body


class RecordingOrigin:
    """Origin server that records the exact bytes each request arrived as."""

    def __init__(self, ssl_context=None, status=200, body=b"ok"):
        self.requests: list[bytes] = []
        self.status = status
        self.body = body
        origin = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                if ssl_context is not None:
                    try:
                        sock = ssl_context.wrap_socket(sock, server_side=True)
                    except ssl.SSLError:
                        return
                reader = sock.makefile("rb")
                while True:
                    raw = _read_one_request(reader)
                    if not raw:
                        break
                    origin.requests.append(raw)
                    response = (
                        f"HTTP/1.1 {origin.status} X\r\n"
                        f"Content-Length: {len(origin.body)}\r\n"
                        f"Connection: keep-alive\r\n\r\n"
                    ).encode() + origin.body
                    try:
                        sock.sendall(response)
                    except OSError:
                        break

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self.server = Server(("127.0.0.1", 0), Handler)
        self.port = self.server.server_address[1]
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


def http_via_proxy(proxy_port: int, raw_request: bytes) -> bytes:
    """Send one plain-HTTP request through the proxy, return the response."""
    with socket.create_connection(("127.0.0.1", proxy_port), timeout=10) as sock:
        sock.sendall(raw_request)
        sock.shutdown(socket.SHUT_WR)
        out = b""
        while True:
            chunk = sock.recv(65536)
            if not chunk:
                return out
            out += chunk


def https_via_proxy(
    proxy_port: int,
    host: str,
    origin_port: int,
    raw_request: bytes,
    ca_cert_path=None,
    verify=False,
    extra_connect_headers: dict | None = None,
) -> bytes:
    """CONNECT + TLS + one request through the proxy. Returns response bytes."""
    sock = socket.create_connection(("127.0.0.1", proxy_port), timeout=10)
    connect = f"CONNECT {host}:{origin_port} HTTP/1.1\r\nHost: {host}:{origin_port}\r\n"
    for name, value in (extra_connect_headers or {}).items():
        connect += f"{name}: {value}\r\n"
    sock.sendall(connect.encode() + b"\r\n")
    reply = b""
    while b"\r\n\r\n" not in reply:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("no CONNECT response")
        reply += chunk
    if b" 200 " not in reply.split(b"\r\n", 1)[0]:
        sock.close()
        raise ConnectionError(f"CONNECT refused: {reply!r}")
    if verify:
        ctx = ssl.create_default_context(cafile=str(ca_cert_path) if ca_cert_path else None)
    else:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.check_hostname = False
        ctx.verify_mode = ssl.CERT_NONE
    tls = ctx.wrap_socket(sock, server_hostname=host)
    tls.sendall(raw_request)
    out = b""
    try:
        while b"\r\n\r\n" not in out:
            chunk = tls.recv(65536)
            if not chunk:
                break
            out += chunk
        length = 0
        for line in out.split(b"\r\n\r\n", 1)[0].split(b"\r\n"):
            if line.lower().startswith(b"content-length:"):
                length = int(line.split(b":", 1)[1])
        body_sofar = out.split(b"\r\n\r\n", 1)[1] if b"\r\n\r\n" in out else b""
        while len(body_sofar) < length:
            chunk = tls.recv(65536)
            if not chunk:
                break
            body_sofar += chunk
            out += chunk
    finally:
        tls.close()
    return out
