"""Canonical key-value extraction from parsed HTTP requests.

Keys carry a position prefix so the same name in different containers
cannot collide: ``U:`` for URI query arguments, ``H:`` for headers, ``B:``
for the body. Nested structure is flattened with ``.`` between path
segments and zero-based indices for list elements, e.g. a JSON body
``{"user": {"id": 9}}`` yields ``B:user.id -> "9"``. A body that parses as
none of the known formats degrades to a single pair under the fixed key
``B:__raw__``.

Values are kept exactly as extracted: no trimming, no case folding, and
numeric literals keep their source spelling. Downstream sketch hashing
depends on that.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from urllib.parse import unquote_plus

from .http_request import ParsedRequest

RAW_KEY_SUFFIX = "__raw__"

# Standard negotiation/transport headers carry no identifiers worth mining.
# "if-*" and "proxy-*" families are matched by prefix.
COMMON_HEADERS = {
    "accept",
    "accept-charset",
    "accept-encoding",
    "accept-language",
    "cache-control",
    "connection",
    "content-length",
    "content-type",
    "host",
    "origin",
    "pragma",
    "referer",
    "te",
    "upgrade",
    "via",
    "date",
    "expect",
    "range",
    "dnt",
    "transfer-encoding",
    "keep-alive",
}
COMMON_HEADER_PREFIXES = ("if-", "proxy-")


@dataclass(frozen=True)
class KeyValue:
    key: str
    value: str


@dataclass
class ExtractionStats:
    """Counters surfaced by the offline analyzer and the proxy."""

    bodies_seen: int = 0
    bodies_unparsed: int = 0

    def unparsed_fraction(self) -> float:
        return self.bodies_unparsed / self.bodies_seen if self.bodies_seen else 0.0


def is_common_header(name: str) -> bool:
    lname = name.lower()
    return lname in COMMON_HEADERS or lname.startswith(COMMON_HEADER_PREFIXES)


def _stringify(scalar) -> str:
    if isinstance(scalar, str):
        return scalar
    if scalar is True:
        return "true"
    if scalar is False:
        return "false"
    if scalar is None:
        return "null"
    return str(scalar)


def parse_json(text: str):
    # Numbers keep their source spelling by parsing them as raw strings.
    return json.loads(
        text,
        parse_float=str,
        parse_int=str,
        parse_constant=str,
    )


def parse_xml(text: str):
    root = ET.fromstring(text)
    return {root.tag: _xml_node(root)}


def _xml_node(elem: ET.Element):
    children = list(elem)
    if not children and not elem.attrib:
        return elem.text if elem.text is not None else ""
    out: dict = dict(elem.attrib)
    for child in children:
        converted = _xml_node(child)
        if child.tag in out:
            prior = out[child.tag]
            if isinstance(prior, list):
                prior.append(converted)
            else:
                out[child.tag] = [prior, converted]
        else:
            out[child.tag] = converted
    if not children and elem.text is not None and elem.text.strip():
        out["#text"] = elem.text
    return out


def parse_form(text: str):
    """URL-encoded form as an ordered pair list (duplicate names kept)."""
    if not text or "=" not in text:
        raise ValueError("not a form body")
    pairs = []
    for chunk in text.split("&"):
        if "=" not in chunk:
            raise ValueError(f"chunk {chunk!r} has no '='")
        name, _, value = chunk.partition("=")
        if not name:
            raise ValueError("empty form field name")
        pairs.append((unquote_plus(name), unquote_plus(value)))
    return pairs


_PARSERS = {
    "json": parse_json,
    "xml": parse_xml,
    "form": parse_form,
}

_HINT_FORMATS = (
    ("json", "json"),
    ("xml", "xml"),
    ("x-www-form-urlencoded", "form"),
)


def parse_value(text: str, hint: str | None = None):
    """Best-effort structural parse: hint, then JSON, XML, URL-encoded.

    Returns a dict, a list (possibly of (name, node) pairs for forms), or
    the text itself if no format matched.
    """
    order = []
    if hint:
        for needle, fmt in _HINT_FORMATS:
            if needle in hint.lower():
                order.append(fmt)
                break
    order += [fmt for fmt in ("json", "xml", "form") if fmt not in order]
    for fmt in order:
        try:
            parsed = _PARSERS[fmt](text)
        except Exception:
            continue
        # A bare JSON scalar is not structure; fall through to plain text.
        if isinstance(parsed, (dict, list)):
            return parsed
    return text


def _is_pair_list(node) -> bool:
    return (
        isinstance(node, list)
        and bool(node)
        and all(isinstance(e, tuple) and len(e) == 2 for e in node)
    )


def flatten(structure, prefix: str) -> list[KeyValue]:
    """Leaf scalars of ``structure`` as KeyValue pairs under ``prefix``.

    ``prefix`` is either a bare container marker ("B") or an already-rooted
    key ("H:Cookie"). The first segment after a bare marker is joined with
    ":", deeper segments with "."; a scalar directly under a bare marker
    takes the fixed raw key.
    """
    out: list[KeyValue] = []
    _flatten_into(structure, prefix, ":" not in prefix, out)
    return out


def _flatten_into(node, prefix: str, bare: bool, out: list[KeyValue]) -> None:
    sep = ":" if bare else "."
    if isinstance(node, dict):
        for key, child in node.items():
            _flatten_into(child, f"{prefix}{sep}{key}", False, out)
    elif _is_pair_list(node):
        for key, child in node:
            _flatten_into(child, f"{prefix}{sep}{key}", False, out)
    elif isinstance(node, list):
        for idx, child in enumerate(node):
            _flatten_into(child, f"{prefix}{sep}{idx}", False, out)
    else:
        key = f"{prefix}:{RAW_KEY_SUFFIX}" if bare else prefix
        out.append(KeyValue(key, _stringify(node)))


def _cookie_pairs(value: str) -> list[KeyValue]:
    out = []
    for part in value.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, val = part.partition("=")
        out.append(KeyValue(f"H:Cookie.{name.strip()}", val))
    return out


def extract_kv(req: ParsedRequest, stats: ExtractionStats | None = None) -> list[KeyValue]:
    """All extractable key-value pairs of a request, in a fixed order.

    Order: query arguments, then headers top to bottom, then body leaves.
    Duplicate keys stay as separate entries; each will increment the
    signature sketch once.
    """
    out: list[KeyValue] = []
    for name, value in req.query:
        out.append(KeyValue(f"U:{name}", value))
    for name, value in req.headers:
        if is_common_header(name):
            continue
        if name.lower() == "cookie":
            out.extend(_cookie_pairs(value))
            continue
        out.extend(flatten(parse_value(value), f"H:{name}"))
    if req.body:
        if stats:
            stats.bodies_seen += 1
        text = req.body.decode("utf-8", errors="replace")
        parsed = parse_value(text, hint=req.header("Content-Type"))
        if stats and not isinstance(parsed, (dict, list)):
            stats.bodies_unparsed += 1
        out.extend(flatten(parsed, "B"))
    return out
