"""Traffic signatures: identity tuple, per-key sketches, wire encoding.

A signature groups every request an app makes to one endpoint: the SID
(package, version, method, host, path) is the grouping key, and each
extracted key gets its own count-min sketch of observed values. Private
signatures summarize one device; public ones are server-side merges of
many devices.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable

from .errors import DecodeError, SidMismatch
from .extract import KeyValue
from .http_request import ParsedRequest
from .sketch import CountMinSketch

PRIVATE = "private"
PUBLIC = "public"

# Long hex runs in URL paths are almost always per-install tokens; they
# splinter one endpoint into per-user SIDs that never accumulate enough
# observations. Generalizing them is an opt-in extension (off by default,
# which reproduces the splintering and its false positives).
_PATH_TOKEN_RE = re.compile(r"^[0-9a-f]{16,}$")


def generalize_path(path: str) -> str:
    segments = path.split("/")
    return "/".join("*" if _PATH_TOKEN_RE.match(seg) else seg for seg in segments)


@dataclass(frozen=True, order=True)
class SID:
    package: str
    version: str
    method: str
    host: str
    path: str

    def __post_init__(self):
        for name in ("package", "version", "method", "host", "path"):
            if not getattr(self, name):
                raise ValueError(f"SID field {name} must be non-empty")
        object.__setattr__(self, "host", self.host.lower())
        if not self.path.startswith("/"):
            raise ValueError(f"SID path must start with '/', got {self.path!r}")

    def to_obj(self) -> dict:
        return {
            "package": self.package,
            "version": self.version,
            "method": self.method,
            "host": self.host,
            "path": self.path,
        }

    @classmethod
    def from_obj(cls, obj: dict, path: str = "sid") -> "SID":
        if not isinstance(obj, dict):
            raise DecodeError("sid must be an object", path)
        try:
            return cls(
                package=obj["package"],
                version=obj["version"],
                method=obj["method"],
                host=obj["host"],
                path=obj["path"],
            )
        except KeyError as exc:
            raise DecodeError(f"missing sid field {exc.args[0]!r}", path) from exc
        except (TypeError, ValueError) as exc:
            raise DecodeError(str(exc), path) from exc


def sid_of(req: ParsedRequest, generalize_paths: bool = False) -> SID:
    """Signature identity of a request; the query string never enters."""
    return SID(
        package=req.app,
        version=req.app_version,
        method=req.method,
        host=req.host,
        path=generalize_path(req.path) if generalize_paths else req.path,
    )


class Signature:
    """SID plus one sketch per extracted key."""

    __slots__ = ("sid", "kind", "keys", "user_count")

    def __init__(self, sid: SID, kind: str = PRIVATE, user_count: int = 1):
        if kind not in (PRIVATE, PUBLIC):
            raise ValueError(f"bad signature kind {kind!r}")
        self.sid = sid
        self.kind = kind
        self.keys: dict[str, CountMinSketch] = {}
        self.user_count = user_count

    def update(self, kvs: Iterable[KeyValue]) -> None:
        """Record extracted pairs; sketches are created on first sight."""
        for kv in kvs:
            sketch = self.keys.get(kv.key)
            if sketch is None:
                sketch = self.keys[kv.key] = CountMinSketch()
            sketch.increment(kv.value.encode("utf-8"))

    def observations(self, key: str) -> int:
        sketch = self.keys.get(key)
        return sketch.m if sketch else 0

    def copy(self) -> "Signature":
        out = Signature(self.sid, self.kind, self.user_count)
        out.keys = {k: s.copy() for k, s in self.keys.items()}
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Signature):
            return NotImplemented
        return (
            self.sid == other.sid
            and self.kind == other.kind
            and self.user_count == other.user_count
            and self.keys == other.keys
        )

    def __repr__(self) -> str:
        return f"Signature({self.sid}, kind={self.kind}, keys={len(self.keys)})"


def merge_signature(pub: Signature, priv: Signature, count_user: bool = False) -> Signature:
    """Merge an uploaded signature into a public one, key-wise.

    Keys absent from ``pub`` are adopted wholesale. ``count_user`` is
    decided by the upload accounting (once per install token per SID),
    not here.
    """
    if pub.sid != priv.sid:
        raise SidMismatch(f"{pub.sid} != {priv.sid}")
    out = Signature(pub.sid, PUBLIC, pub.user_count + (1 if count_user else 0))
    out.keys = {k: s.copy() for k, s in pub.keys.items()}
    for key, sketch in priv.keys.items():
        existing = out.keys.get(key)
        out.keys[key] = sketch.copy() if existing is None else existing.merge(sketch)
    return out


def encode(sig: Signature) -> bytes:
    return json.dumps(to_obj(sig), separators=(",", ":"), sort_keys=True).encode("utf-8")


def to_obj(sig: Signature) -> dict:
    return {
        "sid": sig.sid.to_obj(),
        "kind": sig.kind,
        "user_count": sig.user_count,
        "keys": {key: sketch.to_obj() for key, sketch in sig.keys.items()},
    }


def from_obj(obj: object) -> Signature:
    if not isinstance(obj, dict):
        raise DecodeError("signature must be an object", "signature")
    for name in ("sid", "kind", "user_count", "keys"):
        if name not in obj:
            raise DecodeError(f"missing field {name!r}", "signature")
    sid = SID.from_obj(obj["sid"])
    kind = obj["kind"]
    if kind not in (PRIVATE, PUBLIC):
        raise DecodeError(f"bad kind {kind!r}", "signature.kind")
    user_count = obj["user_count"]
    if not isinstance(user_count, int) or user_count < 1:
        raise DecodeError("user_count must be a positive integer", "signature.user_count")
    keys = obj["keys"]
    if not isinstance(keys, dict):
        raise DecodeError("keys must be an object", "signature.keys")
    sig = Signature(sid, kind, user_count)
    for key, sketch_obj in keys.items():
        if not _valid_key(key):
            raise DecodeError(f"key {key!r} violates the key grammar", f"signature.keys[{key!r}]")
        sig.keys[key] = CountMinSketch.from_obj(sketch_obj, path=f"signature.keys[{key!r}]")
    return sig


def decode(data: bytes) -> Signature:
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise DecodeError(str(exc.msg), f"offset {exc.pos}") from exc
    return from_obj(obj)


def _valid_key(key: str) -> bool:
    if len(key) < 3 or key[:2] not in ("U:", "H:", "B:"):
        return False
    return all(seg != "" for seg in key[2:].split("."))


def write_signature_file(path, sigs: Iterable[Signature]) -> None:
    """Persist signatures, one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for sig in sigs:
            fh.write(encode(sig).decode("utf-8") + "\n")


def read_signature_file(path) -> list[Signature]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(decode(line.encode("utf-8")))
    return out


class SignatureStore:
    """In-memory SID-keyed signature map used by the proxy and analyzer."""

    def __init__(self, kind: str = PRIVATE, generalize_paths: bool = False):
        self.kind = kind
        self.generalize_paths = generalize_paths
        self._sigs: dict[SID, Signature] = {}

    def sid_of(self, req: ParsedRequest) -> SID:
        return sid_of(req, generalize_paths=self.generalize_paths)

    def get(self, sid: SID) -> Signature | None:
        return self._sigs.get(sid)

    def get_or_create(self, sid: SID) -> Signature:
        sig = self._sigs.get(sid)
        if sig is None:
            sig = self._sigs[sid] = Signature(sid, self.kind)
        return sig

    def update(self, req: ParsedRequest, kvs: Iterable[KeyValue]) -> Signature:
        sig = self.get_or_create(self.sid_of(req))
        sig.update(kvs)
        return sig

    def put(self, sig: Signature) -> None:
        self._sigs[sig.sid] = sig

    def merge_upload(self, sig: Signature, count_user: bool = False) -> Signature:
        existing = self._sigs.get(sig.sid)
        if existing is None:
            merged = sig.copy()
            merged.kind = self.kind
            merged.user_count = 1
        else:
            merged = merge_signature(existing, sig, count_user=count_user)
            merged.kind = self.kind
        self._sigs[sig.sid] = merged
        return merged

    def all(self) -> list[Signature]:
        return list(self._sigs.values())

    def sids(self) -> list[SID]:
        return list(self._sigs)

    def for_app(self, package: str, version: str | None = None) -> list[Signature]:
        return [
            s
            for s in self._sigs.values()
            if s.sid.package == package
            and (version is None or s.sid.version == version)
        ]

    def __len__(self) -> int:
        return len(self._sigs)

    def __contains__(self, sid: SID) -> bool:
        return sid in self._sigs
