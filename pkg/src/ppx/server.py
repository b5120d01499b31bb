"""Aggregation server: merges uploaded signatures, serves the crowd state.

Clients upload private signatures under an opaque install token. The token
exists purely to count distinct users per SID (and to dedup retries); it is
persisted only as a SHA-256 hash and never alongside anything that could
identify the uploader. Raw key values never reach the server at all --
uploads carry sketch counters, telemetry carries counts.

State is an append-only JSON-Lines journal plus a compacted snapshot;
recovery replays the snapshot then the journal tail.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from pathlib import Path

from . import signature as sig_mod
from .errors import DecodeError, ShapeMismatch
from .signature import SID, Signature, merge_signature
from .webutil import ApiServer, JsonApi

MIN_KEY_OBSERVATIONS = 10
WHITELIST_MIN_USERS = 5
CRASH_WHITELIST_MIN_USERS = 2

_TELEMETRY_REQUIRED = {
    "app": str,
    "version": str,
    "requests_seen": int,
    "pii_detected_count": int,
    "user_marked_tp": int,
    "user_marked_fp": int,
    "protocol_counts": dict,
    "crash_reports": list,
}
_FORBIDDEN_FIELDS = {"value", "values", "raw", "body", "preview"}


def _token_hash(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


def _content_hash(sig_obj: dict) -> str:
    blob = json.dumps(sig_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _sid_key(sid: SID) -> str:
    return json.dumps(sid.to_obj(), sort_keys=True, separators=(",", ":"))


def validate_token(token) -> bool:
    if not isinstance(token, str) or len(token) != 32:
        return False
    try:
        int(token, 16)
    except ValueError:
        return False
    return True


def validate_telemetry(record) -> str | None:
    """Schema check; returns an error string or None when acceptable."""
    if not isinstance(record, dict):
        return "telemetry record must be an object"
    forbidden = _FORBIDDEN_FIELDS & set(record)
    if forbidden:
        return f"telemetry must not carry raw values (fields: {sorted(forbidden)})"
    for name, typ in _TELEMETRY_REQUIRED.items():
        if name not in record:
            return f"missing field {name!r}"
        if not isinstance(record[name], typ) or isinstance(record[name], bool):
            if typ is not bool:
                return f"field {name!r} must be {typ.__name__}"
    for name in ("requests_seen", "pii_detected_count", "user_marked_tp", "user_marked_fp"):
        if record[name] < 0:
            return f"field {name!r} must be >= 0"
    for proto, count in record["protocol_counts"].items():
        if proto not in ("http", "https", "other"):
            return f"unknown protocol {proto!r}"
        if not isinstance(count, int) or count < 0:
            return "protocol counts must be non-negative integers"
    for report in record["crash_reports"]:
        if not isinstance(report, dict) or set(report) - {"sid", "key", "status_class"}:
            return "crash reports must be {sid, key, status_class} objects"
        if _FORBIDDEN_FIELDS & set(report):
            return "crash reports must not carry raw values"
    return None


class ServerStore:
    """Aggregated state with journal/snapshot persistence.

    ``data_dir=None`` keeps everything in memory (tests, dry runs).
    """

    def __init__(self, data_dir=None):
        self._lock = threading.Lock()
        self.publics: dict[SID, Signature] = {}
        self.sid_tokens: dict[SID, set[str]] = {}
        self.upload_seen: set[tuple[str, str, str]] = set()
        self.telemetry: list[dict] = []
        self.crash_tokens: dict[tuple[str, str], set[str]] = {}  # (sid_key, key)
        self.data_dir = Path(data_dir) if data_dir else None
        self._journal_fh = None
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._recover()
            self._journal_fh = open(self._journal_path(), "a", encoding="utf-8")

    def _journal_path(self) -> Path:
        return self.data_dir / "journal.jsonl"

    def _snapshot_path(self) -> Path:
        return self.data_dir / "snapshot.json"

    def close(self) -> None:
        if self._journal_fh:
            self._journal_fh.close()
            self._journal_fh = None

    # -- persistence ----------------------------------------------------

    def _append(self, event: dict) -> None:
        if self._journal_fh:
            self._journal_fh.write(json.dumps(event, separators=(",", ":")) + "\n")
            self._journal_fh.flush()

    def _recover(self) -> None:
        snap = self._snapshot_path()
        if snap.exists():
            with open(snap, "r", encoding="utf-8") as fh:
                self._load_snapshot(json.load(fh))
        journal = self._journal_path()
        if journal.exists():
            with open(journal, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._replay(json.loads(line))

    def _load_snapshot(self, obj: dict) -> None:
        for sig_obj in obj.get("publics", []):
            sig = sig_mod.from_obj(sig_obj)
            self.publics[sig.sid] = sig
        for sid_key, tokens in obj.get("sid_tokens", {}).items():
            sid = SID.from_obj(json.loads(sid_key))
            self.sid_tokens[sid] = set(tokens)
        self.upload_seen = {tuple(item) for item in obj.get("upload_seen", [])}
        self.telemetry = list(obj.get("telemetry", []))
        for item in obj.get("crash_tokens", []):
            self.crash_tokens[(item["sid_key"], item["key"])] = set(item["tokens"])

    def _replay(self, event: dict) -> None:
        op = event.get("op")
        if op == "upload":
            self._apply_upload(
                event["token_hash"], sig_mod.from_obj(event["signature"]), event["content_hash"]
            )
        elif op == "telemetry":
            self._apply_telemetry(event["token_hash"], event["record"], event["day"])

    def compact(self) -> None:
        """Write a snapshot and truncate the journal."""
        with self._lock:
            snapshot = {
                "publics": [sig_mod.to_obj(s) for s in self.publics.values()],
                "sid_tokens": {
                    _sid_key(sid): sorted(tokens) for sid, tokens in self.sid_tokens.items()
                },
                "upload_seen": [list(t) for t in sorted(self.upload_seen)],
                "telemetry": self.telemetry,
                "crash_tokens": [
                    {"sid_key": sk, "key": key, "tokens": sorted(tokens)}
                    for (sk, key), tokens in self.crash_tokens.items()
                ],
            }
            if not self.data_dir:
                return
            tmp = self._snapshot_path().with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(snapshot, fh, separators=(",", ":"))
            tmp.replace(self._snapshot_path())
            if self._journal_fh:
                self._journal_fh.close()
            self._journal_fh = open(self._journal_path(), "w", encoding="utf-8")

    # -- uploads ---------------------------------------------------------

    def _apply_upload(self, token_hash: str, sig: Signature, content_hash: str) -> str:
        sid = sig.sid
        sid_key = _sid_key(sid)
        dedup_key = (token_hash, sid_key, content_hash)
        if dedup_key in self.upload_seen:
            return "duplicate"
        # Quality gate: drop keys with too few observations, not the batch.
        kept = {k: s for k, s in sig.keys.items() if s.m >= MIN_KEY_OBSERVATIONS}
        if not kept:
            return "rejected_min_observations"
        upload = Signature(sid, sig_mod.PRIVATE)
        upload.keys = kept
        tokens = self.sid_tokens.setdefault(sid, set())
        count_user = token_hash not in tokens
        tokens.add(token_hash)
        existing = self.publics.get(sid)
        if existing is None:
            merged = Signature(sid, sig_mod.PUBLIC, user_count=len(tokens))
            merged.keys = {k: s.copy() for k, s in upload.keys.items()}
        else:
            merged = merge_signature(existing, upload, count_user=False)
            merged.user_count = len(tokens)
        self.publics[sid] = merged
        self.upload_seen.add(dedup_key)
        return "accepted" if count_user else "accepted_existing_user"

    def upload_batch(self, token: str, sig_objs: list) -> tuple[int, list[dict]]:
        """Apply one upload batch; returns (accepted_count, per-item status)."""
        token_hash = _token_hash(token)
        results = []
        accepted = 0
        with self._lock:
            for idx, sig_obj in enumerate(sig_objs):
                try:
                    sig = sig_mod.from_obj(sig_obj)
                except ShapeMismatch as exc:
                    results.append({"index": idx, "status": "shape_mismatch", "error": str(exc)})
                    continue
                except DecodeError as exc:
                    results.append({"index": idx, "status": "decode_error", "error": str(exc)})
                    continue
                if not sig.keys:
                    results.append({"index": idx, "status": "empty"})
                    continue
                content_hash = _content_hash(sig_mod.to_obj(sig))
                status = self._apply_upload(token_hash, sig, content_hash)
                if status.startswith("accepted"):
                    accepted += 1
                    self._append(
                        {
                            "op": "upload",
                            "token_hash": token_hash,
                            "content_hash": content_hash,
                            "signature": sig_mod.to_obj(sig),
                        }
                    )
                results.append({"index": idx, "status": status})
        return accepted, results

    def download(self, package: str, version: str | None = None) -> list[Signature]:
        with self._lock:
            return [
                s.copy()
                for s in self.publics.values()
                if s.sid.package == package
                and (version is None or s.sid.version == version)
            ]

    # -- telemetry and whitelists -----------------------------------------

    def _apply_telemetry(self, token_hash: str, record: dict, day: str) -> None:
        self.telemetry.append({"token_hash": token_hash, "day": day, **record})
        for report in record.get("crash_reports", []):
            sid_key = json.dumps(report["sid"], sort_keys=True, separators=(",", ":"))
            self.crash_tokens.setdefault((sid_key, report["key"]), set()).add(token_hash)

    def ingest_telemetry(self, token: str, record: dict) -> None:
        token_hash = _token_hash(token)
        day = time.strftime("%Y-%m-%d", time.gmtime())
        with self._lock:
            self._apply_telemetry(token_hash, record, day)
            self._append(
                {"op": "telemetry", "token_hash": token_hash, "record": record, "day": day}
            )

    def compute_whitelist(self) -> list[tuple[str, str]]:
        """Apps safe to bypass: enough distinct users, zero detections."""
        with self._lock:
            users: dict[tuple[str, str], set[str]] = {}
            detections: dict[tuple[str, str], int] = {}
            for rec in self.telemetry:
                app = (rec["app"], rec["version"])
                users.setdefault(app, set()).add(rec["token_hash"])
                detections[app] = detections.get(app, 0) + rec["pii_detected_count"]
            return sorted(
                app
                for app, tokens in users.items()
                if len(tokens) >= WHITELIST_MIN_USERS and detections.get(app, 0) == 0
            )

    def compute_crash_whitelist(self) -> list[tuple[dict, str]]:
        """(sid, key) pairs whose filtering broke the app for several users."""
        with self._lock:
            out = []
            for (sid_key, key), tokens in self.crash_tokens.items():
                if len(tokens) >= CRASH_WHITELIST_MIN_USERS:
                    out.append((json.loads(sid_key), key))
            return sorted(out, key=lambda item: (json.dumps(item[0], sort_keys=True), item[1]))

    def stats(self) -> dict:
        with self._lock:
            return {
                "signatures": len(self.publics),
                "apps": len({(s.sid.package, s.sid.version) for s in self.publics.values()}),
                "telemetry_records": len(self.telemetry),
            }


def build_api(store: ServerStore) -> JsonApi:
    api = JsonApi()

    @api.route("POST", r"/api/v1/signatures")
    def upload(match, query, body):
        if not isinstance(body, dict):
            return 400, {"error": "expected an object body"}
        token = body.get("install_token")
        if not validate_token(token):
            return 400, {"error": "install_token must be 32 hex chars"}
        sigs = body.get("signatures")
        if not isinstance(sigs, list):
            return 400, {"error": "signatures must be a list"}
        accepted, results = store.upload_batch(token, sigs)
        return 200, {"accepted": accepted, "results": results}

    @api.route("GET", r"/api/v1/signatures")
    def download(match, query, body):
        package = query.get("package")
        if not package:
            return 400, {"error": "package parameter is required"}
        sigs = store.download(package, query.get("version") or None)
        return 200, {"signatures": [sig_mod.to_obj(s) for s in sigs]}

    @api.route("GET", r"/api/v1/whitelist")
    def whitelist(match, query, body):
        return 200, {"apps": [list(app) for app in store.compute_whitelist()]}

    @api.route("GET", r"/api/v1/crash-whitelist")
    def crash_whitelist(match, query, body):
        return 200, {
            "pairs": [{"sid": sid, "key": key} for sid, key in store.compute_crash_whitelist()]
        }

    @api.route("POST", r"/api/v1/telemetry")
    def telemetry(match, query, body):
        if not isinstance(body, dict):
            return 400, {"error": "expected an object body"}
        token = body.get("install_token")
        if not validate_token(token):
            return 400, {"error": "install_token must be 32 hex chars"}
        record = body.get("record")
        error = validate_telemetry(record)
        if error:
            return 400, {"error": error}
        store.ingest_telemetry(token, record)
        return 204, None

    @api.route("GET", r"/api/v1/stats")
    def stats(match, query, body):
        return 200, store.stats()

    return api


def serve(listen: str, data_dir, block: bool = True) -> ApiServer:
    host, _, port = listen.rpartition(":")
    store = ServerStore(data_dir)
    server = ApiServer(host or "127.0.0.1", int(port), build_api(store))
    server.store = store
    if block:
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            store.compact()
            store.close()
    else:
        server.start()
    return server
