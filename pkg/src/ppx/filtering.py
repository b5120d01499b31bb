"""Scrub confirmed PII from outgoing requests with format-preserving stand-ins.

A value is only ever rewritten after a human confirmed it as PII and
enabled filtering for its (SID, key). The stand-in keeps the value's shape
where we can recognize one (MAC stays a MAC, email stays an email, all
from reserved documentation ranges so they collide with nobody real);
anything unrecognized becomes zeros of the same length.

Rewrites touch only the container the value sits in -- the query string,
one header, or the body -- and leave every other byte of the request as it
arrived.
"""

from __future__ import annotations

import ipaddress
import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from urllib.parse import quote

from .errors import RewriteUnsupported
from .extract import (
    RAW_KEY_SUFFIX,
    extract_kv,
    is_common_header,
    parse_form,
    parse_value,
)
from .http_request import CRLF, HEAD_END, ParsedRequest, encode_query, serialize
from .signature import SID, sid_of

# Value formats, matched in this order; first hit wins.
MAC_ADDRESS = "MacAddress"
EMAIL = "Email"
IPV4 = "IPv4"
IPV6 = "IPv6"
PHONE_NUMBER = "PhoneNumber"
SSN = "SSN"
HEX_HASH = "HexHash"
OTHER = "Other"

_MAC_RE = re.compile(r"^(?:[0-9A-Fa-f]{2}[:-]){5}[0-9A-Fa-f]{2}$")
_EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")
_IPV4_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")
# Bare digit runs stay unmatched: they are just as likely numeric IDs, and
# zero-filled stand-ins must never re-match as phone numbers.
_PHONE_RE = re.compile(
    r"^(?:\+?1[-. ]?)?(?:\(\d{3}\)|\d{3})[-. ]\d{3}[-. ]\d{4}$|^\+\d{10,15}$"
)
_SSN_RE = re.compile(r"^\d{3}-\d{2}-\d{4}$")
_HEX_HASH_RE = re.compile(r"^[0-9A-Fa-f]{16,128}$")

# Static stand-ins, identical for every user; all from reserved ranges.
REPLACEMENTS = {
    MAC_ADDRESS: "02:00:00:00:00:00",
    EMAIL: "anon@example.invalid",
    IPV4: "192.0.2.0",
    IPV6: "2001:db8::",
    PHONE_NUMBER: "000-000-0000",
    SSN: "000-00-0000",
}


def detect_format(value: str) -> str:
    if _MAC_RE.match(value):
        return MAC_ADDRESS
    if _EMAIL_RE.match(value):
        return EMAIL
    if _IPV4_RE.match(value):
        m = _IPV4_RE.match(value)
        if all(int(octet) <= 255 for octet in m.groups()):
            return IPV4
    if ":" in value:
        try:
            ipaddress.IPv6Address(value)
            return IPV6
        except ValueError:
            pass
    if _PHONE_RE.match(value):
        return PHONE_NUMBER
    if _SSN_RE.match(value):
        return SSN
    if _HEX_HASH_RE.match(value) and len(value) % 2 == 0:
        return HEX_HASH
    return OTHER


def replacement_for(value: str) -> str:
    if value and set(value) == {"0"}:
        return value  # already an anonymized stand-in
    fmt = detect_format(value)
    if fmt in (HEX_HASH, OTHER):
        return "0" * len(value)
    return REPLACEMENTS[fmt]


# Rule lifecycle
LABEL_PII = "pii"
LABEL_NOT_PII = "not_pii"
LABEL_UNSURE = "unsure"

STATUS_ACTIVE = "Active"
STATUS_CRASH_SUSPECTED = "CrashSuspected"
STATUS_WHITELISTED = "Whitelisted"


@dataclass
class FilterRule:
    sid: SID
    key: str
    label: str = LABEL_UNSURE
    filter_enabled: bool = False
    status: str = STATUS_ACTIVE
    failure_streak: int = 0

    def __post_init__(self):
        if self.filter_enabled and self.label != LABEL_PII:
            raise ValueError("filtering requires the pair to be confirmed PII")

    def set_label(self, label: str) -> None:
        if label not in (LABEL_PII, LABEL_NOT_PII, LABEL_UNSURE):
            raise ValueError(f"bad label {label!r}")
        self.label = label
        if label != LABEL_PII:
            self.filter_enabled = False

    def set_filter(self, enabled: bool) -> None:
        if enabled and self.label != LABEL_PII:
            raise ValueError("cannot enable filtering before the pair is marked PII")
        self.filter_enabled = enabled

    def to_obj(self) -> dict:
        return {
            "sid": self.sid.to_obj(),
            "key": self.key,
            "label": self.label,
            "filter_enabled": self.filter_enabled,
            "status": self.status,
            "failure_streak": self.failure_streak,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "FilterRule":
        return cls(
            sid=SID.from_obj(obj["sid"]),
            key=obj["key"],
            label=obj.get("label", LABEL_UNSURE),
            filter_enabled=bool(obj.get("filter_enabled", False)),
            status=obj.get("status", STATUS_ACTIVE),
            failure_streak=int(obj.get("failure_streak", 0)),
        )


class RuleSet:
    """(SID, key)-indexed rules with JSON-Lines persistence."""

    def __init__(self, crash_threshold: int = 3):
        self._rules: dict[tuple[SID, str], FilterRule] = {}
        self.crash_threshold = crash_threshold

    def get(self, sid: SID, key: str) -> FilterRule | None:
        return self._rules.get((sid, key))

    def get_or_create(self, sid: SID, key: str) -> FilterRule:
        rule = self._rules.get((sid, key))
        if rule is None:
            rule = self._rules[(sid, key)] = FilterRule(sid=sid, key=key)
        return rule

    def put(self, rule: FilterRule) -> None:
        self._rules[(rule.sid, rule.key)] = rule

    def all(self) -> list[FilterRule]:
        return list(self._rules.values())

    def enabled_keys(self, sid: SID, crash_exempt: set | None = None) -> set[str]:
        """Keys to scrub for this SID; crash-whitelisted pairs are exempt."""
        out = set()
        for (rule_sid, key), rule in self._rules.items():
            if rule_sid != sid or not rule.filter_enabled:
                continue
            if rule.status == STATUS_WHITELISTED:
                continue
            if crash_exempt and (rule_sid, key) in crash_exempt:
                continue
            out.add(key)
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rule in self._rules.values():
                fh.write(json.dumps(rule.to_obj(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path, crash_threshold: int = 3) -> "RuleSet":
        rules = cls(crash_threshold)
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rules.put(FilterRule.from_obj(json.loads(line)))
        return rules


def record_response(rule: FilterRule, status_code: int, crash_threshold: int = 3) -> dict | None:
    """Feed the response status of a filtered request back into the rule.

    Returns a telemetry crash report for 4xx/5xx responses, None otherwise.
    """
    if 200 <= status_code < 400:
        rule.failure_streak = 0
        return None
    if status_code < 400:
        return None
    rule.failure_streak += 1
    if rule.failure_streak >= crash_threshold and rule.status == STATUS_ACTIVE:
        rule.status = STATUS_CRASH_SUSPECTED
    return {
        "sid": rule.sid.to_obj(),
        "key": rule.key,
        "status_class": f"{status_code // 100}xx",
    }


def _replace_structure(node, prefix: str, bare: bool, targets: set[str]) -> tuple[object, bool]:
    """Mirror of extract.flatten that rewrites matched leaves in place."""
    sep = ":" if bare else "."
    changed = False
    if isinstance(node, dict):
        out = {}
        for key, child in node.items():
            new_child, did = _replace_structure(child, f"{prefix}{sep}{key}", False, targets)
            out[key] = new_child
            changed = changed or did
        return out, changed
    if isinstance(node, list) and node and all(isinstance(e, tuple) and len(e) == 2 for e in node):
        out_pairs = []
        for key, child in node:
            new_child, did = _replace_structure(child, f"{prefix}{sep}{key}", False, targets)
            out_pairs.append((key, new_child))
            changed = changed or did
        return out_pairs, changed
    if isinstance(node, list):
        out_list = []
        for idx, child in enumerate(node):
            new_child, did = _replace_structure(child, f"{prefix}{sep}{idx}", False, targets)
            out_list.append(new_child)
            changed = changed or did
        return out_list, changed
    key = f"{prefix}:{RAW_KEY_SUFFIX}" if bare else prefix
    if key in targets:
        text = node if isinstance(node, str) else json.dumps(node)
        return replacement_for(text), True
    return node, False


def _rewrite_xml(text: str, prefix: str, bare: bool, targets: set[str]) -> tuple[str, bool]:
    root = ET.fromstring(text)
    sep = ":" if bare else "."
    changed = _rewrite_xml_elem(root, f"{prefix}{sep}{root.tag}", targets)
    return ET.tostring(root, encoding="unicode"), changed


def _rewrite_xml_elem(elem: ET.Element, prefix: str, targets: set[str]) -> bool:
    changed = False
    children = list(elem)
    if not children and not elem.attrib:
        if prefix in targets and elem.text is not None:
            elem.text = replacement_for(elem.text)
            changed = True
        return changed
    for name in elem.attrib:
        if f"{prefix}.{name}" in targets:
            elem.attrib[name] = replacement_for(elem.attrib[name])
            changed = True
    seen: dict[str, int] = {}
    dup_tags = {}
    for child in children:
        dup_tags[child.tag] = dup_tags.get(child.tag, 0) + 1
    for child in children:
        if dup_tags[child.tag] > 1:
            idx = seen.get(child.tag, 0)
            seen[child.tag] = idx + 1
            child_prefix = f"{prefix}.{child.tag}.{idx}"
        else:
            child_prefix = f"{prefix}.{child.tag}"
        changed = _rewrite_xml_elem(child, child_prefix, targets) or changed
    if not children and elem.text is not None and elem.text.strip():
        if f"{prefix}.#text" in targets:
            elem.text = replacement_for(elem.text)
            changed = True
    return changed


def _rewrite_body(body: bytes, content_type: str | None, targets: set[str]) -> bytes | None:
    """New body bytes with matched B: leaves replaced; None if unchanged."""
    body_targets = {t for t in targets if t.startswith("B:")}
    if not body_targets or not body:
        return None
    text = body.decode("utf-8", errors="replace")
    parsed = parse_value(text, hint=content_type)
    if not isinstance(parsed, (dict, list)):
        # Raw text body: a structural rewrite is not possible.
        raise RewriteUnsupported(
            f"rules target {sorted(body_targets)} inside an unparseable body"
        )
    if isinstance(parsed, dict):
        try:
            probe = json.loads(text)
            is_json = isinstance(probe, (dict, list))
        except (json.JSONDecodeError, ValueError):
            is_json = False
        if is_json:
            new_obj, changed = _replace_structure(probe, "B", True, body_targets)
            if not changed:
                return None
            return json.dumps(new_obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        # XML parsed into a map
        new_text, changed = _rewrite_xml(text, "B", True, body_targets)
        return new_text.encode("utf-8") if changed else None
    if parsed and all(isinstance(e, tuple) for e in parsed):
        new_pairs, changed = _replace_structure(parsed, "B", True, body_targets)
        if not changed:
            return None
        return encode_query([(n, v) for n, v in new_pairs]).encode("utf-8")
    # JSON array body
    new_obj, changed = _replace_structure(json.loads(text), "B", True, body_targets)
    if not changed:
        return None
    return json.dumps(new_obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _rewrite_header_value(name: str, value: str, targets: set[str]) -> str | None:
    """New value for one header if any of its keys matched; else None."""
    if name.lower() == "cookie":
        parts = []
        changed = False
        for part in value.split(";"):
            stripped = part.strip()
            if not stripped:
                continue
            cname, _, cval = stripped.partition("=")
            if f"H:Cookie.{cname.strip()}" in targets:
                parts.append(f"{cname}={replacement_for(cval)}")
                changed = True
            else:
                parts.append(stripped)
        return "; ".join(parts) if changed else None
    prefix = f"H:{name}"
    relevant = {t for t in targets if t == prefix or t.startswith(prefix + ".")}
    if not relevant:
        return None
    parsed = parse_value(value)
    if not isinstance(parsed, (dict, list)):
        return replacement_for(value) if prefix in relevant else None
    if isinstance(parsed, list) and parsed and all(isinstance(e, tuple) for e in parsed):
        new_pairs, changed = _replace_structure(parsed, prefix, False, relevant)
        return encode_query(list(new_pairs)) if changed else None
    try:
        probe = json.loads(value)
    except (json.JSONDecodeError, ValueError):
        probe = None
    if isinstance(probe, (dict, list)):
        new_obj, changed = _replace_structure(probe, prefix, False, relevant)
        if not changed:
            return None
        return json.dumps(new_obj, separators=(",", ":"), ensure_ascii=False)
    # XML header value
    new_text, changed = _rewrite_xml(value, prefix, False, relevant)
    return new_text if changed else None


@dataclass
class FilterOutcome:
    data: bytes
    applied: list[FilterRule] = field(default_factory=list)

    @property
    def modified(self) -> bool:
        return bool(self.applied)


def apply_filters(
    req: ParsedRequest,
    rules: RuleSet,
    crash_exempt: set | None = None,
    generalize_paths: bool = False,
) -> FilterOutcome:
    """Rewrite a request under the enabled rules for its SID.

    Returns the outgoing raw bytes; byte-identical to the input when no
    rule matches. Raises RewriteUnsupported when a matched value sits in a
    body we cannot re-serialize (the caller forwards unmodified and logs).
    """
    sid = sid_of(req, generalize_paths=generalize_paths)
    targets = rules.enabled_keys(sid, crash_exempt)
    present = {kv.key for kv in extract_kv(req)}
    targets &= present
    if not targets:
        return FilterOutcome(data=req.raw_head + req.raw_body if req.raw_head is not None else serialize(req))

    new_query = None
    if any(t.startswith("U:") for t in targets):
        rebuilt = []
        changed = False
        for name, value in req.query:
            if f"U:{name}" in targets:
                rebuilt.append((name, replacement_for(value)))
                changed = True
            else:
                rebuilt.append((name, value))
        if changed:
            new_query = rebuilt

    header_changes: dict[int, str] = {}
    if any(t.startswith("H:") for t in targets):
        for idx, (name, value) in enumerate(req.headers):
            if is_common_header(name):
                continue
            new_value = _rewrite_header_value(name, value, targets)
            if new_value is not None:
                header_changes[idx] = new_value

    new_body = _rewrite_body(req.body, req.header("Content-Type"), targets)

    if new_query is None and not header_changes and new_body is None:
        return FilterOutcome(data=req.raw_head + req.raw_body if req.raw_head is not None else serialize(req))

    applied = [
        rules.get(sid, key)
        for key in sorted(targets)
        if rules.get(sid, key) is not None
    ]
    return FilterOutcome(
        data=_emit(req, new_query, header_changes, new_body),
        applied=applied,
    )


def _emit(
    req: ParsedRequest,
    new_query: list[tuple[str, str]] | None,
    header_changes: dict[int, str],
    new_body: bytes | None,
) -> bytes:
    """Re-serialize only what changed, keeping all other bytes as received."""
    body = new_body if new_body is not None else req.body
    if req.raw_head is None:
        patched = ParsedRequest(**{**req.__dict__})
        if new_query is not None:
            patched.query = new_query
            patched.raw_query = None
        patched.headers = [
            (n, header_changes.get(i, v)) for i, (n, v) in enumerate(req.headers)
        ]
        patched.body = body
        return serialize(patched)

    head = req.raw_head[: -len(HEAD_END)]
    lines = head.split(CRLF)
    request_line = lines[0]
    if new_query is not None:
        method, _, rest = request_line.partition(b" ")
        target, _, version = rest.rpartition(b" ")
        base = target.split(b"?", 1)[0]
        encoded = encode_query(new_query).encode("latin-1")
        request_line = method + b" " + base + (b"?" + encoded if encoded else b"") + b" " + version

    out_lines = [request_line]
    header_idx = 0
    body_changed = new_body is not None
    for line in lines[1:]:
        name = line.split(b":", 1)[0].strip().decode("latin-1")
        replacement_value = header_changes.get(header_idx)
        lname = name.lower()
        if body_changed and lname in ("content-length", "transfer-encoding"):
            header_idx += 1
            continue
        if replacement_value is not None:
            out_lines.append(f"{name}: {replacement_value}".encode("latin-1"))
        else:
            out_lines.append(line)
        header_idx += 1
    if body_changed:
        out_lines.append(b"Content-Length: %d" % len(body))
        raw_body_out = body
    else:
        raw_body_out = req.raw_body if req.raw_body is not None else body
    return CRLF.join(out_lines) + HEAD_END + raw_body_out


def quote_path_segment(value: str) -> str:
    return quote(value, safe="")
