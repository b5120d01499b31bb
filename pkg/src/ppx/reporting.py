"""Report rendering and the PII taxonomy used in summaries.

Detected values are bucketed the way privacy reports usually slice them:
well-known platform identifiers, location data, and identifiers apps mint
for themselves (fingerprints, install IDs, random hashes). Assignment uses
a key-name dictionary first and falls back to the value's shape.
"""

from __future__ import annotations

import re

from .filtering import EMAIL, HEX_HASH, IPV4, IPV6, MAC_ADDRESS, PHONE_NUMBER, SSN, detect_format

STANDARD_IDS = "standard_ids"
LOCATION = "location"
APP_GENERATED = "app_generated_ids"
OTHER = "other"

_STANDARD_KEY_TOKENS = (
    "imei",
    "imsi",
    "udid",
    "android_id",
    "androidid",
    "advertising",
    "adid",
    "ad_id",
    "gsf",
    "mac",
    "serial",
    "email",
    "msisdn",
    "phone",
    "ssn",
)
_LOCATION_KEY_TOKENS = (
    "lat",
    "lon",
    "lng",
    "latitude",
    "longitude",
    "zip",
    "zipcode",
    "postal",
    "geo",
    "location",
)
_APP_ID_KEY_TOKENS = (
    "install_id",
    "installid",
    "instance_id",
    "fingerprint",
    "device_id",
    "deviceid",
    "uuid",
    "guid",
    "identity",
    "attribution",
    "session_id",
    "client_id",
    "user_id",
)

_UUID_RE = re.compile(
    r"^[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}$"
)


def taxonomy_of(key: str, value: str) -> str:
    lkey = key.lower()
    if any(tok in lkey for tok in _STANDARD_KEY_TOKENS):
        return STANDARD_IDS
    if any(tok in lkey for tok in _LOCATION_KEY_TOKENS):
        return LOCATION
    if any(tok in lkey for tok in _APP_ID_KEY_TOKENS):
        return APP_GENERATED
    fmt = detect_format(value)
    if fmt in (MAC_ADDRESS, EMAIL, IPV4, IPV6, PHONE_NUMBER, SSN):
        return STANDARD_IDS
    if fmt == HEX_HASH or _UUID_RE.match(value):
        return APP_GENERATED
    return OTHER


def render_table(headers: list[str], rows: list[list]) -> str:
    """Plain aligned text table."""
    cells = [[str(c) for c in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in cells:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
