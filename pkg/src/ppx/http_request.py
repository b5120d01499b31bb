"""HTTP/1.1 request model: parsing raw bytes, re-serialization, trace I/O.

``ParsedRequest`` is the unit every other stage consumes. Parsing keeps the
original wire bytes around (``raw_head``/``raw_body``) so the proxy can
forward a request byte-identically when nothing needs rewriting; the
canonical serializer is only used for requests built from traces or for
containers the filter engine actually changed.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from urllib.parse import quote, unquote_plus

from .errors import MalformedRequest

CRLF = b"\r\n"
HEAD_END = b"\r\n\r\n"

# Hop-by-hop headers are a proxy concern, not an extraction concern; the
# forwarding path strips these plus the x-pp-* attribution pair.
HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-connection",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
}


@dataclass
class ParsedRequest:
    app: str
    app_version: str
    method: str
    scheme: str
    host: str
    port: int
    path: str
    query: list[tuple[str, str]]
    headers: list[tuple[str, str]]
    body: bytes
    timestamp: int
    # Wire-faithful extras; None for requests assembled from traces.
    raw_head: bytes | None = field(default=None, repr=False)
    raw_body: bytes | None = field(default=None, repr=False)
    raw_query: str | None = field(default=None, repr=False)
    chunked: bool = False

    def header(self, name: str) -> str | None:
        """First header value matching ``name`` (case-insensitive)."""
        lname = name.lower()
        for hname, value in self.headers:
            if hname.lower() == lname:
                return value
        return None

    def without_headers(self, names: set[str]) -> "ParsedRequest":
        """Copy with the named headers removed (case-insensitive)."""
        lowered = {n.lower() for n in names}
        kept = [(n, v) for n, v in self.headers if n.lower() not in lowered]
        out = ParsedRequest(**{**self.__dict__, "headers": kept})
        if out.raw_head is not None:
            out.raw_head = _strip_head_lines(out.raw_head, lowered)
        return out


def encode_query(pairs: list[tuple[str, str]]) -> str:
    """Percent-encode query pairs; the inverse of ``decode_query``."""
    return "&".join(f"{quote(n, safe='')}={quote(v, safe='')}" for n, v in pairs)


def decode_query(raw: str) -> list[tuple[str, str]]:
    """Split a raw query string into ordered decoded (name, value) pairs."""
    pairs = []
    for chunk in raw.split("&"):
        if not chunk:
            continue
        name, _, value = chunk.partition("=")
        pairs.append((unquote_plus(name), unquote_plus(value)))
    return pairs


def _decode_chunked(data: bytes) -> tuple[bytes, bytes]:
    """Decode a chunked body, returning (payload, raw bytes consumed)."""
    out = bytearray()
    pos = 0
    while True:
        line_end = data.find(CRLF, pos)
        if line_end < 0:
            raise MalformedRequest("truncated chunk size line")
        size_token = data[pos:line_end].split(b";", 1)[0].strip()
        try:
            size = int(size_token, 16)
        except ValueError as exc:
            raise MalformedRequest(f"bad chunk size {size_token!r}") from exc
        pos = line_end + 2
        if size == 0:
            # Skip trailers up to the terminating blank line.
            while True:
                line_end = data.find(CRLF, pos)
                if line_end < 0:
                    raise MalformedRequest("truncated chunk trailer")
                line = data[pos:line_end]
                pos = line_end + 2
                if not line:
                    return bytes(out), data[:pos]
        if pos + size + 2 > len(data):
            raise MalformedRequest("truncated chunk data")
        out += data[pos : pos + size]
        if data[pos + size : pos + size + 2] != CRLF:
            raise MalformedRequest("chunk data not CRLF-terminated")
        pos += size + 2


def _parse_header_block(lines: list[bytes]) -> list[tuple[str, str]]:
    headers = []
    for line in lines:
        name, sep, value = line.partition(b":")
        if not sep or not name.strip():
            raise MalformedRequest(f"bad header line {line!r}")
        headers.append(
            (name.decode("latin-1").strip(), value.decode("latin-1").strip())
        )
    return headers


def _strip_head_lines(raw_head: bytes, lowered_names: set[str]) -> bytes:
    head, _, rest = raw_head.partition(HEAD_END)
    lines = head.split(CRLF)
    kept = [lines[0]]
    for line in lines[1:]:
        name = line.split(b":", 1)[0].strip().lower().decode("latin-1")
        if name not in lowered_names:
            kept.append(line)
    return CRLF.join(kept) + HEAD_END + rest


def parse_raw(
    data: bytes,
    app: str = "",
    app_version: str = "",
    timestamp: int = 0,
    scheme: str = "http",
) -> ParsedRequest:
    """Parse one HTTP/1.1 request from raw bytes.

    The head must be complete. The body is read per Content-Length, or
    decoded if Transfer-Encoding is chunked; anything past the framed body
    is ignored. Raises MalformedRequest when there is no usable request
    line or a header is unparseable -- callers forward such traffic
    unmodified and skip analysis.
    """
    head_end = data.find(HEAD_END)
    if head_end < 0:
        raise MalformedRequest("incomplete request head")
    head = data[:head_end]
    lines = head.split(CRLF)
    parts = lines[0].split()
    if len(parts) != 3 or not parts[2].startswith(b"HTTP/"):
        raise MalformedRequest(f"bad request line {lines[0]!r}")
    method = parts[0].decode("latin-1")
    if not method or not method.isascii():
        raise MalformedRequest(f"bad method {parts[0]!r}")
    target = parts[1].decode("latin-1")
    headers = _parse_header_block(lines[1:])

    host, port, path = "", 0, target
    if target.lower().startswith(("http://", "https://")):
        # absolute-form, as sent to a forward proxy
        scheme, rest = target.split("://", 1)
        netloc, slash, tail = rest.partition("/")
        host_hdr = netloc
        path = slash + tail if slash else "/"
        host, _, port_s = host_hdr.partition(":")
        port = int(port_s) if port_s else 0
    if not host:
        host_hdr = next((v for n, v in headers if n.lower() == "host"), "")
        host, _, port_s = host_hdr.partition(":")
        if port_s:
            try:
                port = int(port_s)
            except ValueError as exc:
                raise MalformedRequest(f"bad Host port {port_s!r}") from exc
    if not port:
        port = 443 if scheme == "https" else 80

    path, _, raw_query = path.partition("?")
    if not path.startswith("/"):
        path = "/" + path if path else "/"

    body_start = head_end + 4
    te = next((v for n, v in headers if n.lower() == "transfer-encoding"), "")
    chunked = "chunked" in te.lower()
    if chunked:
        body, raw_body = _decode_chunked(data[body_start:])
    else:
        length_s = next((v for n, v in headers if n.lower() == "content-length"), "0")
        try:
            length = int(length_s)
        except ValueError as exc:
            raise MalformedRequest(f"bad Content-Length {length_s!r}") from exc
        raw_body = data[body_start : body_start + length]
        if len(raw_body) < length:
            raise MalformedRequest("body shorter than Content-Length")
        body = raw_body

    return ParsedRequest(
        app=app,
        app_version=app_version,
        method=method.upper(),
        scheme=scheme,
        host=host.lower(),
        port=port,
        path=path,
        query=decode_query(raw_query),
        headers=headers,
        body=body,
        timestamp=timestamp,
        raw_head=data[:body_start],
        raw_body=raw_body,
        raw_query=raw_query,
        chunked=chunked,
    )


def serialize(req: ParsedRequest, origin_form: bool = True) -> bytes:
    """Canonical wire form of a request (origin-form target by default)."""
    query = req.raw_query if req.raw_query is not None else encode_query(req.query)
    target = req.path + ("?" + query if query else "")
    if not origin_form:
        default = 443 if req.scheme == "https" else 80
        netloc = req.host if req.port == default else f"{req.host}:{req.port}"
        target = f"{req.scheme}://{netloc}{target}"
    out = bytearray(f"{req.method} {target} HTTP/1.1\r\n".encode("latin-1"))
    has_host = False
    has_length = False
    for name, value in req.headers:
        lname = name.lower()
        if lname == "host":
            has_host = True
        if lname == "content-length":
            value = str(len(req.body))
            has_length = True
        if lname == "transfer-encoding":
            continue  # body is always emitted with explicit length
        out += f"{name}: {value}\r\n".encode("latin-1")
    if not has_host:
        out += f"Host: {req.host}\r\n".encode("latin-1")
    if not has_length and req.body:
        out += f"Content-Length: {len(req.body)}\r\n".encode("latin-1")
    out += CRLF
    out += req.body
    return bytes(out)


def to_trace_obj(req: ParsedRequest) -> dict:
    """One trace-file line: the offline capture format."""
    return {
        "app": req.app,
        "version": req.app_version,
        "ts": req.timestamp,
        "request": {
            "method": req.method,
            "scheme": req.scheme,
            "host": req.host,
            "port": req.port,
            "path": req.path,
            "query": [[n, v] for n, v in req.query],
            "headers": [[n, v] for n, v in req.headers],
            "body_b64": base64.b64encode(req.body).decode("ascii"),
        },
    }


def from_trace_obj(obj: dict) -> ParsedRequest:
    r = obj["request"]
    return ParsedRequest(
        app=obj["app"],
        app_version=obj["version"],
        method=r["method"],
        scheme=r.get("scheme", "http"),
        host=r["host"].lower(),
        port=int(r.get("port") or (443 if r.get("scheme") == "https" else 80)),
        path=r["path"],
        query=[(n, v) for n, v in r.get("query", [])],
        headers=[(n, v) for n, v in r.get("headers", [])],
        body=base64.b64decode(r.get("body_b64", "")),
        timestamp=int(obj.get("ts", 0)),
    )


def read_trace_file(path) -> list[ParsedRequest]:
    requests = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                requests.append(from_trace_obj(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise MalformedRequest(f"{path}:{line_no}: {exc}") from exc
    return requests


def write_trace_file(path, requests) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for req in requests:
            fh.write(json.dumps(to_trace_obj(req), separators=(",", ":")) + "\n")
