"""Forward HTTP(S) proxy running the detection pipeline inline.

Every connection is attributed to an app (by listener port or by the
X-PP-App/X-PP-Version header pair, which never leaves the proxy), then each
request flows through extract -> signature update -> classify -> filter
before being forwarded to the origin. Whitelisted apps and apps that earned
the fastpath skip the pipeline entirely; requests we cannot parse are
forwarded untouched.

Analysis must never hold up traffic: it runs under an inline time budget
and falls back to forward-unmodified-classify-later on overrun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import secrets
import socket
import socketserver
import ssl
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from . import signature as sig_mod
from .classify import LIKELY_PII, Classification, ClassifierConfig, classify
from .config import Config
from .errors import MalformedRequest, RewriteUnsupported
from .extract import ExtractionStats, extract_kv
from .fastpath import ANALYZE, FastPathTracker
from .filtering import (
    LABEL_NOT_PII,
    LABEL_PII,
    RuleSet,
    apply_filters,
    record_response,
)
from .http_request import CRLF, HEAD_END, HOP_BY_HOP, parse_raw
from .signature import SID, SignatureStore
from .tlsmitm import CertAuthority, upstream_context
from .webutil import ApiServer, JsonApi

log = logging.getLogger("ppx.proxy")

ATTRIBUTION_HEADERS = {"x-pp-app", "x-pp-version"}
_MAX_HEAD = 256 * 1024


# -- app attribution ---------------------------------------------------------


@dataclass
class AppBinding:
    app: str
    version: str


class AppBindings:
    """Listener-port map plus the attribution-header fallback."""

    def __init__(self, ports: dict[int, AppBinding] | None = None,
                 default: AppBinding | None = None):
        self.ports = ports or {}
        self.default = default

    @classmethod
    def load(cls, path) -> "AppBindings":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        ports = {
            int(port): AppBinding(b["app"], b["version"])
            for port, b in obj.get("ports", {}).items()
        }
        default = None
        if obj.get("default"):
            default = AppBinding(obj["default"]["app"], obj["default"]["version"])
        return cls(ports, default)

    def resolve(self, listener_port: int, headers: list[tuple[str, str]]) -> AppBinding | None:
        header_app = header_version = None
        for name, value in headers:
            lname = name.lower()
            if lname == "x-pp-app":
                header_app = value
            elif lname == "x-pp-version":
                header_version = value
        if header_app and header_version:
            return AppBinding(header_app, header_version)
        if listener_port in self.ports:
            return self.ports[listener_port]
        return self.default


# -- detections shown in the review UI ---------------------------------------


@dataclass
class Detection:
    id: str
    app: str
    version: str
    sid: SID
    key: str
    verdict: str
    p_private: float
    p_public: float | None
    previews: list[str] = field(default_factory=list)
    value_hashes: set[str] = field(default_factory=set)
    count: int = 0
    first_ts: int = 0
    last_ts: int = 0

    def to_obj(self, rules: RuleSet) -> dict:
        rule = rules.get(self.sid, self.key)
        return {
            "id": self.id,
            "app": self.app,
            "version": self.version,
            "sid": self.sid.to_obj(),
            "key": self.key,
            "verdict": self.verdict,
            "p_private": round(self.p_private, 6),
            "p_public": None if self.p_public is None else round(self.p_public, 6),
            "values": list(self.previews),
            "unique_values": len(self.value_hashes),
            "count": self.count,
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
            "label": rule.label if rule else "unsure",
            "filter_enabled": bool(rule and rule.filter_enabled),
            "status": rule.status if rule else "Active",
        }


def detection_id(sid: SID, key: str) -> str:
    blob = json.dumps(sid.to_obj(), sort_keys=True) + "|" + key
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


# -- whitelist cache ----------------------------------------------------------


class WhitelistCache:
    def __init__(self, path: Path | None = None):
        self.path = path
        self.apps: set[tuple[str, str]] = set()
        self.crash_pairs: set[tuple[str, str]] = set()  # (sid json, key)
        self.fetched_at: float = 0.0
        if path and path.exists():
            self._load()

    def _load(self) -> None:
        obj = json.loads(self.path.read_text(encoding="utf-8"))
        self.apps = {tuple(a) for a in obj.get("apps", [])}
        self.crash_pairs = {tuple(p) for p in obj.get("crash_pairs", [])}
        self.fetched_at = obj.get("fetched_at", 0.0)

    def save(self) -> None:
        if not self.path:
            return
        self.path.write_text(
            json.dumps(
                {
                    "apps": sorted(list(a) for a in self.apps),
                    "crash_pairs": sorted(list(p) for p in self.crash_pairs),
                    "fetched_at": self.fetched_at,
                },
                separators=(",", ":"),
            ),
            encoding="utf-8",
        )

    def crash_exempt_sids(self) -> set[tuple[SID, str]]:
        out = set()
        for sid_json, key in self.crash_pairs:
            try:
                out.add((SID.from_obj(json.loads(sid_json)), key))
            except Exception:
                continue
        return out


# -- wire reading helpers ------------------------------------------------------


def _read_head(reader) -> bytes | None:
    """Raw head bytes through the blank line; None on immediate EOF."""
    lines = []
    total = 0
    while True:
        line = reader.readline(_MAX_HEAD)
        if not line:
            if not lines:
                return None
            raise MalformedRequest("connection closed mid-head")
        lines.append(line)
        total += len(line)
        if total > _MAX_HEAD:
            raise MalformedRequest("head too large")
        if line in (b"\r\n", b"\n"):
            if len(lines) > 1:
                return b"".join(lines)
            lines.clear()  # tolerate leading blank lines
            total = 0


def _head_framing(head: bytes) -> tuple[int | None, bool]:
    """(content_length, chunked) scanned leniently from raw head bytes."""
    length = None
    chunked = False
    for line in head.split(CRLF)[1:]:
        name, sep, value = line.partition(b":")
        if not sep:
            continue
        lname = name.strip().lower()
        if lname == b"content-length":
            try:
                length = int(value.strip())
            except ValueError:
                pass
        elif lname == b"transfer-encoding" and b"chunked" in value.lower():
            chunked = True
    return length, chunked


def _read_exact(reader, n: int) -> bytes:
    data = reader.read(n)
    if len(data) < n:
        raise MalformedRequest(f"short read: wanted {n}, got {len(data)}")
    return data


def _read_chunked_raw(reader) -> bytes:
    out = bytearray()
    while True:
        line = reader.readline(65536)
        if not line:
            raise MalformedRequest("eof inside chunked body")
        out += line
        try:
            size = int(line.strip().split(b";")[0], 16)
        except ValueError as exc:
            raise MalformedRequest(f"bad chunk size line {line!r}") from exc
        if size == 0:
            while True:
                trailer = reader.readline(65536)
                if not trailer:
                    raise MalformedRequest("eof inside chunk trailers")
                out += trailer
                if trailer in (b"\r\n", b"\n"):
                    return bytes(out)
        out += _read_exact(reader, size + 2)


def read_wire_request(reader) -> bytes | None:
    """One full request exactly as it appeared on the wire."""
    head = _read_head(reader)
    if head is None:
        return None
    length, chunked = _head_framing(head)
    if chunked:
        return head + _read_chunked_raw(reader)
    if length:
        return head + _read_exact(reader, length)
    return head


def _strip_request_head(raw: bytes, drop: set[str]) -> bytes:
    """Remove named headers and force the request line to origin-form."""
    head, _, body = raw.partition(HEAD_END)
    lines = head.split(CRLF)
    method, _, rest = lines[0].partition(b" ")
    target, _, version = rest.rpartition(b" ")
    t = target.decode("latin-1")
    if t.lower().startswith(("http://", "https://")):
        _, rest_t = t.split("://", 1)
        slash = rest_t.find("/")
        t = rest_t[slash:] if slash >= 0 else "/"
    out_lines = [method + b" " + t.encode("latin-1") + b" " + version]
    for line in lines[1:]:
        name = line.split(b":", 1)[0].strip().lower().decode("latin-1")
        if name in drop:
            continue
        out_lines.append(line)
    out_lines.append(b"Connection: close")
    return CRLF.join(out_lines) + HEAD_END + body


RESPONSE_STRIP = {"connection", "keep-alive", "proxy-connection", "proxy-authenticate"}


def _relay_response(up_reader, client_wfile, request_method: str) -> tuple[int, bool]:
    """Pipe one upstream response to the client.

    Returns (status_code, client_must_close).
    """
    head = _read_head(up_reader)
    if head is None:
        raise MalformedRequest("upstream closed without a response")
    status_line = head.split(CRLF, 1)[0]
    parts = status_line.split()
    status = int(parts[1]) if len(parts) >= 2 and parts[1].isdigit() else 502
    length, chunked = _head_framing(head)
    bodyless = request_method == "HEAD" or status in (204, 304) or 100 <= status < 200
    body = b""
    must_close = False
    if not bodyless:
        if chunked:
            body = _read_chunked_raw(up_reader)
        elif length is not None:
            body = _read_exact(up_reader, length)
        else:
            body = up_reader.read()
    lines = head[: -len(HEAD_END)].split(CRLF)
    out = [lines[0]]
    for line in lines[1:]:
        name = line.split(b":", 1)[0].strip().lower().decode("latin-1")
        if name in RESPONSE_STRIP:
            continue
        if not bodyless and not chunked and length is None and name == "content-length":
            continue
        out.append(line)
    if not bodyless and not chunked and length is None:
        out.append(b"Content-Length: %d" % len(body))
    client_wfile.write(CRLF.join(out) + HEAD_END + body)
    client_wfile.flush()
    return status, must_close


# -- the proxy -----------------------------------------------------------------


class _Listener(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class Proxy:
    def __init__(
        self,
        listen: str,
        ca: CertAuthority | None = None,
        bindings: AppBindings | None = None,
        cfg: Config | None = None,
        admin_listen: str | None = None,
        dashboard_dir: str | None = None,
    ):
        self.cfg = cfg or Config()
        host, _, port = listen.rpartition(":")
        self.host = host or "127.0.0.1"
        self.port = int(port)
        self.ca = ca
        self.bindings = bindings or AppBindings()
        self.rng = random.Random(self.cfg.seed)
        self.data_dir = Path(self.cfg.data_dir) if self.cfg.data_dir else None
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)

        self.private_store = SignatureStore(generalize_paths=self.cfg.path_generalize)
        self.public_store = SignatureStore(kind="public")
        self.rules = RuleSet(crash_threshold=self.cfg.crash_threshold)
        self.fastpath = FastPathTracker(
            rng=self.rng, threshold_range=(self.cfg.fastpath_min, self.cfg.fastpath_max)
        )
        self.whitelist = WhitelistCache(
            self.data_dir / "whitelist_cache.json" if self.data_dir else None
        )
        self.detections: dict[str, Detection] = {}
        self.classifier_cfg = ClassifierConfig(t=self.cfg.t, ct=self.cfg.ct)

        self._analysis_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self.pinned_hosts: set[tuple[str, str]] = set()
        self.pinning_counts: dict[str, int] = {}
        self.counters = {
            "values_sent": 0,
            "requests_seen": 0,
            "requests_bypassed": 0,
            "requests_unanalyzed": 0,
            "bodies_unparsed": 0,
            "rewrite_unsupported": 0,
        }
        self.protocol_counts: dict[str, dict[str, int]] = {}
        self.hosts_contacted: set[str] = set()
        self._telemetry_sent: dict[tuple[str, str], dict] = {}
        self._crash_buffer: list[dict] = []
        self._pending_upload = SignatureStore()
        self.extraction_stats = ExtractionStats()
        self.install_token = self._load_token()

        self._listeners: list[_Listener] = []
        self._threads: list[threading.Thread] = []
        self._admin: ApiServer | None = None
        self.admin_listen = admin_listen
        self.dashboard_dir = Path(dashboard_dir) if dashboard_dir else None
        self._stop = threading.Event()
        self._load_state()
        self.fastpath.startup_resample(
            probability=self.cfg.resample_probability,
            budget=self.cfg.resample_budget,
        )

    # -- persistence ----------------------------------------------------------

    def _load_token(self) -> str:
        if self.data_dir:
            token_path = self.data_dir / "install_token.txt"
            if token_path.exists():
                return token_path.read_text(encoding="utf-8").strip()
            token = secrets.token_hex(16)
            token_path.write_text(token, encoding="utf-8")
            return token
        return secrets.token_hex(16)

    def _load_state(self) -> None:
        if not self.data_dir:
            return
        rules_path = self.data_dir / "rules.jsonl"
        if rules_path.exists():
            self.rules = RuleSet.load(rules_path, self.cfg.crash_threshold)
        fastpath_path = self.data_dir / "fastpath.jsonl"
        if fastpath_path.exists():
            self.fastpath.load(fastpath_path)
        sig_path = self.data_dir / "private_signatures.jsonl"
        if sig_path.exists():
            for sig in sig_mod.read_signature_file(sig_path):
                self.private_store.put(sig)
        pub_path = self.data_dir / "public_signatures.jsonl"
        if pub_path.exists():
            for sig in sig_mod.read_signature_file(pub_path):
                self.public_store.put(sig)

    def save_state(self) -> None:
        if not self.data_dir:
            return
        with self._state_lock:
            self.rules.save(self.data_dir / "rules.jsonl")
            self.fastpath.save(self.data_dir / "fastpath.jsonl")
            sig_mod.write_signature_file(
                self.data_dir / "private_signatures.jsonl", self.private_store.all()
            )
            sig_mod.write_signature_file(
                self.data_dir / "public_signatures.jsonl", self.public_store.all()
            )
            self.whitelist.save()

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        ports = {self.port} | set(self.bindings.ports)
        proxy = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                proxy._handle_connection(self.request, self.server.server_address[1])

        for port in sorted(ports):
            listener = _Listener((self.host, port), Handler)
            if port == self.port:
                self.port = listener.server_address[1]
            self._listeners.append(listener)
            thread = threading.Thread(
                target=listener.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
            )
            thread.start()
            self._threads.append(thread)

        if self.admin_listen:
            ahost, _, aport = self.admin_listen.rpartition(":")
            self._admin = ApiServer(ahost or "127.0.0.1", int(aport), self.admin_api())
            self._admin.start()
            self.admin_port = self._admin.port

        if self.cfg.server_url:
            thread = threading.Thread(target=self._maintenance_loop, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for listener in self._listeners:
            listener.shutdown()
            listener.server_close()
        if self._admin:
            self._admin.stop()
        if self.cfg.server_url:
            try:
                self.upload_signatures()
                self.flush_telemetry()
            except Exception:
                pass
        self.save_state()

    def _maintenance_loop(self) -> None:
        while not self._stop.wait(self.cfg.sync_interval_s):
            try:
                self.sync_whitelists()
                self.upload_signatures()
                self.sync_all_public()
                self.flush_telemetry()
            except Exception as exc:
                log.warning("maintenance sync failed: %s", exc)

    # -- server client ----------------------------------------------------------

    def _server_get(self, path: str):
        with urllib.request.urlopen(self.cfg.server_url.rstrip("/") + path, timeout=10) as resp:
            return json.loads(resp.read())

    def _server_post(self, path: str, obj) -> int:
        data = json.dumps(obj).encode("utf-8")
        req = urllib.request.Request(
            self.cfg.server_url.rstrip("/") + path,
            data=data,
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status

    def sync_whitelists(self) -> None:
        """Refresh cached server whitelists; keep the cache on failure."""
        try:
            apps = self._server_get("/api/v1/whitelist")["apps"]
            pairs = self._server_get("/api/v1/crash-whitelist")["pairs"]
        except (urllib.error.URLError, OSError, KeyError, json.JSONDecodeError) as exc:
            log.warning("whitelist sync failed, keeping cache: %s", exc)
            return
        with self._state_lock:
            self.whitelist.apps = {tuple(a) for a in apps}
            self.whitelist.crash_pairs = {
                (json.dumps(p["sid"], sort_keys=True, separators=(",", ":")), p["key"])
                for p in pairs
            }
            self.whitelist.fetched_at = time.time()
            self.whitelist.save()

    def sync_public_signatures(self, package: str, version: str) -> None:
        try:
            obj = self._server_get(
                f"/api/v1/signatures?package={package}&version={version}"
            )
        except (urllib.error.URLError, OSError) as exc:
            log.warning("signature download failed: %s", exc)
            return
        with self._state_lock:
            for sig_obj in obj.get("signatures", []):
                self.public_store.put(sig_mod.from_obj(sig_obj))

    def sync_all_public(self) -> None:
        """Refresh public signatures for every app this proxy has seen."""
        with self._state_lock:
            apps = list(self.protocol_counts)
        for package, version in apps:
            self.sync_public_signatures(package, version)

    def upload_signatures(self) -> int:
        """Upload pending signature deltas whose keys pass the quality bar."""
        if not self.cfg.server_url:
            return 0
        batch = []
        with self._state_lock:
            for sig in self._pending_upload.all():
                ready = {
                    k: s
                    for k, s in sig.keys.items()
                    if s.m >= self.cfg.min_upload_observations
                }
                if not ready:
                    continue
                out = sig_mod.Signature(sig.sid, sig_mod.PRIVATE)
                out.keys = {k: s.copy() for k, s in ready.items()}
                batch.append(out)
                for key in ready:
                    del sig.keys[key]
        if not batch:
            return 0
        self._server_post(
            "/api/v1/signatures",
            {
                "install_token": self.install_token,
                "signatures": [sig_mod.to_obj(s) for s in batch],
            },
        )
        return len(batch)

    def flush_telemetry(self) -> None:
        if not self.cfg.server_url:
            return
        with self._state_lock:
            records = self._telemetry_deltas()
            crash_by_app: dict[str, list[dict]] = {}
            for report in self._crash_buffer:
                app = report.pop("_app", "")
                crash_by_app.setdefault(app, []).append(report)
            self._crash_buffer = []
        covered = {rec["app"] for rec in records}
        for app, reports in crash_by_app.items():
            if app not in covered:
                # Crash feedback with no other deltas still needs a record.
                version = next(
                    (v for (a, v) in self.protocol_counts if a == app), "0"
                )
                records.append(
                    {
                        "app": app,
                        "version": version,
                        "requests_seen": 0,
                        "pii_detected_count": 0,
                        "user_marked_tp": 0,
                        "user_marked_fp": 0,
                        "protocol_counts": {"http": 0, "https": 0, "other": 0},
                        "crash_reports": [],
                    }
                )
        for record in records:
            record["crash_reports"] = crash_by_app.get(record["app"], [])
            self._server_post(
                "/api/v1/telemetry",
                {"install_token": self.install_token, "record": record},
            )

    def _telemetry_deltas(self) -> list[dict]:
        out = []
        for (app, version), current in self._telemetry_totals().items():
            sent = self._telemetry_sent.get((app, version), {})
            delta = {
                name: current[name] - sent.get(name, 0)
                for name in (
                    "requests_seen",
                    "pii_detected_count",
                    "user_marked_tp",
                    "user_marked_fp",
                )
            }
            protocols = {
                proto: current["protocol_counts"].get(proto, 0)
                - sent.get("protocol_counts", {}).get(proto, 0)
                for proto in ("http", "https", "other")
            }
            if any(delta.values()) or any(protocols.values()):
                out.append(
                    {
                        "app": app,
                        "version": version,
                        **delta,
                        "protocol_counts": protocols,
                        "crash_reports": [],
                    }
                )
                self._telemetry_sent[(app, version)] = current
        return out

    def _telemetry_totals(self) -> dict[tuple[str, str], dict]:
        totals: dict[tuple[str, str], dict] = {}
        for state in self.fastpath.states.values():
            totals.setdefault(
                (state.app, state.version),
                {
                    "requests_seen": 0,
                    "pii_detected_count": 0,
                    "user_marked_tp": 0,
                    "user_marked_fp": 0,
                    "protocol_counts": {"http": 0, "https": 0, "other": 0},
                },
            )
        for (app, version), protos in self.protocol_counts.items():
            entry = totals.setdefault(
                (app, version),
                {
                    "requests_seen": 0,
                    "pii_detected_count": 0,
                    "user_marked_tp": 0,
                    "user_marked_fp": 0,
                    "protocol_counts": {"http": 0, "https": 0, "other": 0},
                },
            )
            for proto, count in protos.items():
                entry["protocol_counts"][proto] += count
                entry["requests_seen"] += count
        for det in self.detections.values():
            if det.verdict == LIKELY_PII and (det.app, det.version) in totals:
                totals[(det.app, det.version)]["pii_detected_count"] += len(det.value_hashes)
        for rule in self.rules.all():
            key = (rule.sid.package, rule.sid.version)
            if key in totals:
                if rule.label == LABEL_PII:
                    totals[key]["user_marked_tp"] += 1
                elif rule.label == LABEL_NOT_PII:
                    totals[key]["user_marked_fp"] += 1
        return totals

    # -- connection handling -----------------------------------------------------

    def _handle_connection(self, client_sock: socket.socket, listener_port: int) -> None:
        client_sock.settimeout(60)
        reader = client_sock.makefile("rb")
        try:
            head = _read_head(reader)
            if head is None:
                return
            first_line = head.split(CRLF, 1)[0]
            if first_line.upper().startswith(b"CONNECT "):
                self._handle_connect(client_sock, reader, head, listener_port)
            else:
                self._serve_requests(
                    client_sock, reader, listener_port, scheme="http",
                    tunnel_host=None, tunnel_port=None, first_head=head,
                )
        except (MalformedRequest, OSError, ssl.SSLError) as exc:
            log.debug("connection error: %s", exc)
        finally:
            try:
                reader.close()
            except OSError:
                pass
            try:
                client_sock.close()
            except OSError:
                pass

    def _handle_connect(self, client_sock, reader, head: bytes, listener_port: int) -> None:
        first_line = head.split(CRLF, 1)[0].decode("latin-1")
        target = first_line.split()[1]
        host, _, port_s = target.partition(":")
        port = int(port_s or 443)
        host = host.lower()
        headers = [
            tuple(part.strip() for part in line.decode("latin-1").split(":", 1))
            for line in head.split(CRLF)[1:]
            if b":" in line
        ]
        binding = self.bindings.resolve(listener_port, headers)

        client_sock.sendall(b"HTTP/1.1 200 Connection Established\r\n\r\n")

        bypass_whole = binding is None or self._app_whitelisted(binding)
        if binding and (binding.app, host) in self.pinned_hosts:
            bypass_whole = True
        if bypass_whole:
            self._tunnel_raw(client_sock, host, port)
            return

        try:
            tls_sock = self.ca.context_for(host).wrap_socket(client_sock, server_side=True)
        except (ssl.SSLError, OSError) as exc:
            # Client refused our certificate: certificate pinning.
            with self._state_lock:
                self.pinned_hosts.add((binding.app, host))
                self.pinning_counts[binding.app] = self.pinning_counts.get(binding.app, 0) + 1
            log.info("pinning suspected for %s -> %s (%s)", binding.app, host, exc)
            return
        tls_reader = tls_sock.makefile("rb")
        try:
            self._serve_requests(
                tls_sock, tls_reader, listener_port, scheme="https",
                tunnel_host=host, tunnel_port=port, first_head=None,
                connect_binding=binding,
            )
        finally:
            try:
                tls_reader.close()
                tls_sock.close()
            except OSError:
                pass

    def _tunnel_raw(self, client_sock, host: str, port: int) -> None:
        try:
            upstream = socket.create_connection((host, port), timeout=20)
        except OSError:
            return
        done = threading.Event()

        def pump(src, dst):
            try:
                while True:
                    data = src.recv(65536)
                    if not data:
                        break
                    dst.sendall(data)
            except OSError:
                pass
            finally:
                done.set()

        t1 = threading.Thread(target=pump, args=(client_sock, upstream), daemon=True)
        t2 = threading.Thread(target=pump, args=(upstream, client_sock), daemon=True)
        t1.start()
        t2.start()
        done.wait(timeout=300)
        for sock in (client_sock, upstream):
            try:
                sock.close()
            except OSError:
                pass

    def _app_whitelisted(self, binding: AppBinding) -> bool:
        return (binding.app, binding.version) in self.whitelist.apps

    def _serve_requests(
        self, client_sock, reader, listener_port: int, scheme: str,
        tunnel_host: str | None, tunnel_port: int | None, first_head: bytes | None,
        connect_binding: AppBinding | None = None,
    ) -> None:
        wfile = client_sock.makefile("wb")
        pending_head = first_head
        while True:
            if pending_head is not None:
                head, pending_head = pending_head, None
                length, chunked = _head_framing(head)
                if chunked:
                    raw = head + _read_chunked_raw(reader)
                elif length:
                    raw = head + _read_exact(reader, length)
                else:
                    raw = head
            else:
                raw = read_wire_request(reader)
            if raw is None:
                return
            close = self._process_request(
                raw, wfile, listener_port, scheme, tunnel_host, tunnel_port,
                connect_binding,
            )
            if close:
                return

    def _process_request(
        self, raw: bytes, wfile, listener_port: int, scheme: str,
        tunnel_host: str | None, tunnel_port: int | None,
        connect_binding: AppBinding | None = None,
    ) -> bool:
        """Analyze/filter/forward one request; returns True to close."""
        try:
            req = parse_raw(raw, scheme=scheme, timestamp=int(time.time() * 1000))
        except MalformedRequest:
            req = None

        binding = (
            self.bindings.resolve(listener_port, req.headers if req else [])
            or connect_binding
        )
        host = tunnel_host or (req.host if req else "")
        port = tunnel_port or (req.port if req else (443 if scheme == "https" else 80))
        if not host:
            wfile.write(b"HTTP/1.1 502 Bad Gateway\r\nContent-Length: 0\r\n\r\n")
            wfile.flush()
            return True

        out_bytes = raw
        applied_rules = []
        head_lower = raw.split(HEAD_END)[0].lower()
        wants_close = (
            b"connection: close" in head_lower
            or head_lower.split(CRLF, 1)[0].endswith(b"http/1.0")
        )

        if req is None or binding is None:
            with self._state_lock:
                self.counters["requests_unanalyzed"] += 1
        else:
            req.app = binding.app
            req.app_version = binding.version
            if tunnel_host:
                req.host = tunnel_host
                req.port = tunnel_port
            req = req.without_headers(ATTRIBUTION_HEADERS)
            raw = req.raw_head + (req.raw_body or b"")
            out_bytes = raw
            with self._state_lock:
                if self._app_whitelisted(binding):
                    decision = "whitelist"
                else:
                    decision = self.fastpath.decide(
                        binding.app, binding.version, req.host, req.path
                    )
                self.hosts_contacted.add(req.host)
                protos = self.protocol_counts.setdefault((binding.app, binding.version), {})
                protos[scheme] = protos.get(scheme, 0) + 1
                self.counters["requests_seen"] += 1
            if decision == ANALYZE:
                out_bytes, applied_rules = self._analyze_with_budget(req, raw)
            else:
                with self._state_lock:
                    self.counters["requests_bypassed"] += 1

        # forward upstream; hopeless heads travel completely untouched
        if req is None:
            upstream_bytes = out_bytes
        else:
            upstream_bytes = _strip_request_head(out_bytes, HOP_BY_HOP | ATTRIBUTION_HEADERS)
        try:
            upstream = socket.create_connection((host, port), timeout=20)
            if scheme == "https":
                upstream = upstream_context().wrap_socket(upstream, server_hostname=host)
        except OSError:
            wfile.write(b"HTTP/1.1 502 Bad Gateway\r\nContent-Length: 0\r\n\r\n")
            wfile.flush()
            return True
        try:
            upstream.sendall(upstream_bytes)
            up_reader = upstream.makefile("rb")
            method = upstream_bytes.split(b" ", 1)[0].decode("latin-1")
            status, _ = _relay_response(up_reader, wfile, method)
        except (OSError, MalformedRequest):
            try:
                wfile.write(b"HTTP/1.1 502 Bad Gateway\r\nContent-Length: 0\r\n\r\n")
                wfile.flush()
            except OSError:
                pass
            return True
        finally:
            try:
                upstream.close()
            except OSError:
                pass

        if applied_rules:
            with self._state_lock:
                for rule in applied_rules:
                    report = record_response(rule, status, self.cfg.crash_threshold)
                    if report:
                        report["_app"] = rule.sid.package
                        self._crash_buffer.append(report)
        return wants_close

    # -- analysis ------------------------------------------------------------------

    def _analyze_with_budget(self, req, raw: bytes) -> tuple[bytes, list]:
        result: dict = {}

        def work():
            try:
                result["out"] = self._analyze(req, raw)
            except Exception as exc:  # never let analysis kill forwarding
                log.warning("analysis failed: %s", exc)
                result["out"] = (raw, [])

        worker = threading.Thread(target=work, daemon=True)
        worker.start()
        worker.join(self.cfg.inline_budget_ms / 1000.0)
        if worker.is_alive():
            # Overrun: forward unmodified now; classification lands late.
            return raw, []
        return result["out"]

    def _analyze(self, req, raw: bytes) -> tuple[bytes, list]:
        with self._analysis_lock:
            stats = self.extraction_stats
            kvs = extract_kv(req, stats)
            sid = self.private_store.sid_of(req)
            priv = self.private_store.update(req, kvs)
            self._pending_upload.update(req, kvs)
            pub = self.public_store.get(sid)
            detected = False
            seen: set[tuple[str, str]] = set()
            with self._state_lock:
                self.counters["values_sent"] += len(kvs)
                self.counters["bodies_unparsed"] = stats.bodies_unparsed
            for kv in kvs:
                if (kv.key, kv.value) in seen:
                    continue
                seen.add((kv.key, kv.value))
                cls = classify(kv, priv, pub, self.classifier_cfg)
                self._record_classification(req, cls)
                if cls.verdict == LIKELY_PII:
                    detected = True
            with self._state_lock:
                self.fastpath.note_analyzed(
                    req.app, req.app_version, req.host, req.path, pii_detected=detected
                )
            try:
                outcome = apply_filters(
                    req,
                    self.rules,
                    crash_exempt=self.whitelist.crash_exempt_sids(),
                    generalize_paths=self.cfg.path_generalize,
                )
            except RewriteUnsupported as exc:
                with self._state_lock:
                    self.counters["rewrite_unsupported"] += 1
                log.warning("rewrite unsupported, forwarding unmodified: %s", exc)
                return raw, []
            return outcome.data, outcome.applied

    def _record_classification(self, req, cls: Classification) -> None:
        if cls.verdict != LIKELY_PII:
            # Keep an existing detection's verdict fresh if it improves.
            with self._state_lock:
                det = self.detections.get(detection_id(cls.sid, cls.key))
                if det:
                    det.verdict = cls.verdict
                    det.p_private = cls.p_private
                    det.p_public = cls.p_public
            return
        did = detection_id(cls.sid, cls.key)
        value_hash = hashlib.sha256(cls.value.encode("utf-8")).hexdigest()[:16]
        with self._state_lock:
            det = self.detections.get(did)
            if det is None:
                det = Detection(
                    id=did,
                    app=req.app,
                    version=req.app_version,
                    sid=cls.sid,
                    key=cls.key,
                    verdict=cls.verdict,
                    p_private=cls.p_private,
                    p_public=cls.p_public,
                    first_ts=req.timestamp,
                )
                self.detections[did] = det
            det.verdict = cls.verdict
            det.p_private = cls.p_private
            det.p_public = cls.p_public
            det.count += 1
            det.last_ts = req.timestamp
            det.value_hashes.add(value_hash)
            preview = cls.value[:32]
            if preview not in det.previews:
                det.previews.append(preview)
                del det.previews[:-5]

    # -- admin API -------------------------------------------------------------------

    def admin_api(self) -> JsonApi:
        api = JsonApi()
        proxy = self

        @api.route("GET", r"/admin/api/summary")
        def summary(match, query, body):
            with proxy._state_lock:
                pii = sum(
                    len(d.value_hashes)
                    for d in proxy.detections.values()
                    if d.verdict == LIKELY_PII
                )
                return 200, {
                    "apps_monitored": len(proxy.protocol_counts),
                    "values_sent": proxy.counters["values_sent"],
                    "pii_detected": pii,
                    "hosts_contacted": len(proxy.hosts_contacted),
                    "requests_seen": proxy.counters["requests_seen"],
                    "requests_bypassed": proxy.counters["requests_bypassed"],
                }

        @api.route("GET", r"/admin/api/apps")
        def apps(match, query, body):
            with proxy._state_lock:
                out = []
                for (app, version), protos in sorted(proxy.protocol_counts.items()):
                    state = proxy.fastpath.states.get((app, version))
                    detections = [
                        d for d in proxy.detections.values()
                        if d.app == app and d.version == version
                    ]
                    out.append(
                        {
                            "app": app,
                            "version": version,
                            "requests_seen": sum(protos.values()),
                            "protocols": protos,
                            "detections": len(detections),
                            "pii_values": sum(len(d.value_hashes) for d in detections),
                            "on_fastpath": bool(state and state.on_fastpath),
                            "whitelisted": (app, version) in proxy.whitelist.apps,
                            "pinning_suspected": proxy.pinning_counts.get(app, 0),
                        }
                    )
                return 200, {"apps": out}

        @api.route("GET", r"/admin/api/apps/([^/]+)/detections")
        def app_detections(match, query, body):
            package = match.group(1)
            with proxy._state_lock:
                dets = sorted(
                    (d for d in proxy.detections.values() if d.app == package),
                    key=lambda d: d.id,
                )
                return 200, {"detections": [d.to_obj(proxy.rules) for d in dets]}

        @api.route("POST", r"/admin/api/detections/([0-9a-f]+)/mark")
        def mark(match, query, body):
            label = (body or {}).get("label")
            if label not in ("pii", "not_pii", "unsure"):
                return 400, {"error": "label must be pii|not_pii|unsure"}
            with proxy._state_lock:
                det = proxy.detections.get(match.group(1))
                if det is None:
                    return 404, {"error": "unknown detection id"}
                rule = proxy.rules.get_or_create(det.sid, det.key)
                if rule.filter_enabled and label != LABEL_PII:
                    return 409, {
                        "error": "filter is enabled; disable it before relabeling"
                    }
                rule.set_label(label)
            proxy.save_state()
            return 200, {"detection": det.to_obj(proxy.rules)}

        @api.route("POST", r"/admin/api/detections/([0-9a-f]+)/filter")
        def set_filter(match, query, body):
            enabled = (body or {}).get("enabled")
            if not isinstance(enabled, bool):
                return 400, {"error": "enabled must be true or false"}
            with proxy._state_lock:
                det = proxy.detections.get(match.group(1))
                if det is None:
                    return 404, {"error": "unknown detection id"}
                rule = proxy.rules.get_or_create(det.sid, det.key)
                try:
                    rule.set_filter(enabled)
                except ValueError as exc:
                    return 409, {"error": str(exc)}
            proxy.save_state()
            return 200, {"detection": det.to_obj(proxy.rules)}

        @api.route("GET", r"/admin/api/whitelist")
        def whitelist(match, query, body):
            with proxy._state_lock:
                return 200, {
                    "apps": sorted(list(a) for a in proxy.whitelist.apps),
                    "crash_pairs": [
                        {"sid": json.loads(sid_json), "key": key}
                        for sid_json, key in sorted(proxy.whitelist.crash_pairs)
                    ],
                    "fetched_at": proxy.whitelist.fetched_at,
                }

        @api.route("GET", r"/(?:admin/?)?(?:ui/)?([a-zA-Z0-9._-]*)")
        def static(match, query, body):
            if not proxy.dashboard_dir:
                return 404, {"error": "dashboard not built"}
            name = match.group(1) or "index.html"
            target = (proxy.dashboard_dir / name).resolve()
            if not str(target).startswith(str(proxy.dashboard_dir.resolve())) or not target.is_file():
                return 404, {"error": f"no such asset {name}"}
            content_types = {
                ".html": "text/html; charset=utf-8",
                ".js": "application/javascript",
                ".css": "text/css",
                ".map": "application/json",
            }
            ctype = content_types.get(target.suffix, "application/octet-stream")
            return 200, target.read_bytes(), ctype

        return api
