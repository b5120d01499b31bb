"""PII decision procedure over private/public signature pairs.

For each extracted (key, value) pair the classifier estimates how often
that exact value appears in the user's own traffic (p_private) and across
all users (p_public), then buckets the pair:

* ApplicationConstant -- stable for this user and at least as common for
  the crowd (developer IDs, API keys baked into the app).
* ContextSensitive    -- varies within the user's own traffic (timestamps,
  nonces, GPS while moving).
* LikelyPII           -- stable for this user but rare for the crowd:
  exactly the shape of a per-device identifier.

Both probabilities come from count-min sketches, so they never
underestimate the true empirical ratio; the procedure errs toward flagging.
A confidence gate (minimum observations of the key on this device) and a
cold-start rule (no public signature means no verdict) keep one-shot
requests from being flagged on sight.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .errors import KeyAbsent
from .extract import KeyValue, extract_kv
from .http_request import ParsedRequest
from .signature import SID, Signature, SignatureStore, sid_of

# Verdicts
APPLICATION_CONSTANT = "ApplicationConstant"
CONTEXT_SENSITIVE = "ContextSensitive"
LIKELY_PII = "LikelyPII"
INSUFFICIENT_DATA = "InsufficientData"

DEFAULT_T = 0.95
DEFAULT_CT = 2


@dataclass(frozen=True)
class ClassifierConfig:
    t: float = DEFAULT_T
    ct: int = DEFAULT_CT

    def __post_init__(self):
        if not 0 < self.t <= 1:
            raise ValueError(f"threshold T must be in (0, 1], got {self.t}")
        if self.ct < 1:
            raise ValueError(f"confidence threshold must be >= 1, got {self.ct}")


@dataclass(frozen=True)
class Classification:
    sid: SID
    key: str
    value: str
    verdict: str
    p_private: float
    p_public: float | None

    def to_report_obj(self) -> dict:
        """Report row with the value hashed and truncated for sharing."""
        return {
            "sid": self.sid.to_obj(),
            "key": self.key,
            "value_hashed": hashlib.sha256(self.value.encode("utf-8")).hexdigest()[:16],
            "value_preview": self.value[:32],
            "verdict": self.verdict,
            "p_private": round(self.p_private, 6),
            "p_public": None if self.p_public is None else round(self.p_public, 6),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_report_obj(), separators=(",", ":"))


def p_value(sig: Signature, key: str, value: str) -> float:
    """Estimated probability of seeing ``value`` under ``key`` in ``sig``."""
    sketch = sig.keys.get(key)
    if sketch is None or sketch.m < 1:
        raise KeyAbsent(f"{key!r} not present in signature for {sig.sid}")
    return sketch.count(value.encode("utf-8")) / sketch.m


def classify(
    kv: KeyValue,
    priv: Signature,
    pub: Signature | None,
    cfg: ClassifierConfig,
) -> Classification:
    """Single-pair verdict given this device's and the crowd's signatures."""
    p_private = p_value(priv, kv.key, kv.value)
    observations = priv.observations(kv.key)

    p_public = None
    if pub is not None and pub.keys.get(kv.key) is not None and pub.keys[kv.key].m >= 1:
        p_public = p_value(pub, kv.key, kv.value)

    if observations < cfg.ct:
        verdict = INSUFFICIENT_DATA
    elif p_private < cfg.t:
        # Varies within the user's own traffic; no crowd data needed.
        verdict = CONTEXT_SENSITIVE
    elif p_public is None:
        # Stable for this user but nobody to compare against yet. Flagging
        # here would mark every cold-start value, so withhold judgment.
        verdict = INSUFFICIENT_DATA
    elif p_private <= p_public:
        verdict = APPLICATION_CONSTANT
    else:
        verdict = LIKELY_PII

    return Classification(
        sid=priv.sid,
        key=kv.key,
        value=kv.value,
        verdict=verdict,
        p_private=p_private,
        p_public=p_public,
    )


def classify_request(
    req: ParsedRequest,
    private_store: SignatureStore,
    public_store: SignatureStore,
    cfg: ClassifierConfig,
) -> list[Classification]:
    """Classify every distinct (key, value) pair of one request.

    Duplicates within the request are classified once. Requires the private
    store to already hold this request's contribution.
    """
    sid = private_store.sid_of(req)
    priv = private_store.get(sid)
    if priv is None:
        return []
    pub = public_store.get(sid)
    out = []
    seen: set[tuple[str, str]] = set()
    for kv in extract_kv(req):
        if (kv.key, kv.value) in seen:
            continue
        seen.add((kv.key, kv.value))
        if kv.key not in priv.keys:
            continue
        out.append(classify(kv, priv, pub, cfg))
    return out
