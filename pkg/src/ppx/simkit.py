"""Synthetic multi-user traffic with ground-truth labels.

Each app spec key has a generating behavior, and the behavior *is* the
label: a value that is constant per user but unique across users is by
construction a per-device identifier; a value shared by everyone is an
application constant; anything that varies within one user's traffic is
context-sensitive. That lets end-to-end detector runs be scored against
exact truth instead of hand labels.

Noise knobs reproduce the known false-positive sources of crowd-signature
detection: endpoints hit once per run (private probability 1.0 on sight)
and random tokens inside URL paths (which fragment the signature space).
"""

from __future__ import annotations

import json
import random
import uuid
from dataclasses import dataclass
from pathlib import Path

from .classify import (
    APPLICATION_CONSTANT,
    CONTEXT_SENSITIVE,
    LIKELY_PII,
    Classification,
    ClassifierConfig,
    classify_request,
)
from .extract import extract_kv
from .http_request import ParsedRequest, write_trace_file
from .signature import SID, SignatureStore

# Value behaviors
PER_USER_CONSTANT = "per_user_constant"
GLOBAL_CONSTANT = "global_constant"
PER_REQUEST_RANDOM = "per_request_random"
TIMESTAMP = "timestamp"
ZIPF_SHARED = "zipf_shared"

BEHAVIOR_LABELS = {
    PER_USER_CONSTANT: LIKELY_PII,
    GLOBAL_CONSTANT: APPLICATION_CONSTANT,
    PER_REQUEST_RANDOM: CONTEXT_SENSITIVE,
    TIMESTAMP: CONTEXT_SENSITIVE,
    ZIPF_SHARED: CONTEXT_SENSITIVE,
}

ZIPF_VOCAB_SIZE = 200
ZIPF_EXPONENT = 1.1


@dataclass
class KeySpec:
    name: str  # canonical key, e.g. "U:device_id", "B:user.id", "H:X-Token"
    behavior: str

    def __post_init__(self):
        if self.behavior not in BEHAVIOR_LABELS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.name[:2] not in ("U:", "H:", "B:"):
            raise ValueError(f"key {self.name!r} must carry a U:/H:/B: prefix")


@dataclass
class EndpointSpec:
    method: str
    host: str
    path: str
    keys: list[KeySpec]
    requests_per_round: int | None = None  # None: use the corpus-wide count
    random_path_token: bool = False


@dataclass
class AppSpec:
    package: str
    version: str
    endpoints: list[EndpointSpec]

    @classmethod
    def from_obj(cls, obj: dict) -> "AppSpec":
        endpoints = []
        for e in obj["endpoints"]:
            endpoints.append(
                EndpointSpec(
                    method=e["method"],
                    host=e["host"],
                    path=e["path"],
                    keys=[KeySpec(k["name"], k["behavior"]) for k in e["keys"]],
                    requests_per_round=e.get("requests_per_round"),
                    random_path_token=bool(e.get("random_path_token", False)),
                )
            )
        return cls(package=obj["package"], version=obj["version"], endpoints=endpoints)

    @classmethod
    def load(cls, path) -> "AppSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))

    def to_obj(self) -> dict:
        return {
            "package": self.package,
            "version": self.version,
            "endpoints": [
                {
                    "method": e.method,
                    "host": e.host,
                    "path": e.path,
                    "keys": [{"name": k.name, "behavior": k.behavior} for k in e.keys],
                    "requests_per_round": e.requests_per_round,
                    "random_path_token": e.random_path_token,
                }
                for e in self.endpoints
            ],
        }


@dataclass
class LabeledCorpus:
    traces: list[list[ParsedRequest]]  # one list per user
    labels: dict[tuple[SID, str], str]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for idx, trace in enumerate(self.traces):
            write_trace_file(out / f"user_{idx:02d}.jsonl", trace)
        with open(out / "labels.jsonl", "w", encoding="utf-8") as fh:
            for (sid, key), label in sorted(
                self.labels.items(), key=lambda item: (item[0][0], item[0][1])
            ):
                fh.write(
                    json.dumps(
                        {"sid": sid.to_obj(), "key": key, "label": label},
                        separators=(",", ":"),
                    )
                    + "\n"
                )

    @classmethod
    def load_labels(cls, path) -> dict[tuple[SID, str], str]:
        labels = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                labels[(SID.from_obj(obj["sid"]), obj["key"])] = obj["label"]
        return labels


class _ValueSource:
    """Deterministic value stream for one (user, endpoint, key)."""

    def __init__(self, spec: AppSpec, key: KeySpec, user: int, seed, endpoint_idx: int):
        self.behavior = key.behavior
        self.counter = 0
        # Independent generators per role keep corpora stable when the
        # request count changes.
        self.rng = random.Random(f"{seed}|{endpoint_idx}|{key.name}|user{user}")
        shared_rng = random.Random(f"{seed}|{endpoint_idx}|{key.name}|shared")
        if key.behavior == PER_USER_CONSTANT:
            self.constant = str(uuid.UUID(int=self.rng.getrandbits(128)))
        elif key.behavior == GLOBAL_CONSTANT:
            self.constant = f"const-{shared_rng.getrandbits(48):012x}"
        elif key.behavior == ZIPF_SHARED:
            self.vocab = [f"item-{shared_rng.getrandbits(32):08x}" for _ in range(ZIPF_VOCAB_SIZE)]
            self.weights = [1.0 / (rank + 1) ** ZIPF_EXPONENT for rank in range(ZIPF_VOCAB_SIZE)]

    def next(self, timestamp: int) -> str:
        self.counter += 1
        if self.behavior in (PER_USER_CONSTANT, GLOBAL_CONSTANT):
            return self.constant
        if self.behavior == PER_REQUEST_RANDOM:
            return f"{self.rng.getrandbits(64):016x}"
        if self.behavior == TIMESTAMP:
            return str(timestamp)
        return self.rng.choices(self.vocab, weights=self.weights, k=1)[0]


def _build_request(
    spec: AppSpec,
    endpoint: EndpointSpec,
    path: str,
    values: dict[str, str],
    timestamp: int,
) -> ParsedRequest:
    query: list[tuple[str, str]] = []
    headers: list[tuple[str, str]] = [("Host", endpoint.host)]
    body_tree: dict = {}
    for key_spec in endpoint.keys:
        value = values[key_spec.name]
        marker, rest = key_spec.name[0], key_spec.name[2:]
        if marker == "U":
            query.append((rest, value))
        elif marker == "H":
            headers.append((rest.split(".", 1)[0], _nest_header(rest, value)))
        else:
            _nest_into(body_tree, rest.split("."), value)
    body = b""
    if body_tree:
        body = json.dumps(body_tree, separators=(",", ":"), sort_keys=True).encode("utf-8")
        headers.append(("Content-Type", "application/json"))
        headers.append(("Content-Length", str(len(body))))
    return ParsedRequest(
        app=spec.package,
        app_version=spec.version,
        method=endpoint.method,
        scheme="https",
        host=endpoint.host,
        port=443,
        path=path,
        query=query,
        headers=headers,
        body=body,
        timestamp=timestamp,
    )


def _nest_header(rest: str, value: str) -> str:
    if "." not in rest:
        return value
    _, path = rest.split(".", 1)
    tree: dict = {}
    _nest_into(tree, path.split("."), value)
    return json.dumps(tree, separators=(",", ":"), sort_keys=True)


def _nest_into(tree: dict, segments: list[str], value: str) -> None:
    for seg in segments[:-1]:
        tree = tree.setdefault(seg, {})
    tree[segments[-1]] = value


def generate(
    spec: AppSpec,
    users: int,
    requests_per_user: int,
    seed=0,
    rounds: int = 1,
    start_round: int = 0,
) -> LabeledCorpus:
    """Per-user traces plus exact labels. Identical seeds give identical bytes.

    ``requests_per_user`` is the per-endpoint request count for one round;
    endpoints may override it (a one-shot endpoint sets it to 1).
    """
    if users < 1:
        raise ValueError("need at least one user")
    labels: dict[tuple[SID, str], str] = {}
    traces: list[list[ParsedRequest]] = []
    for user in range(users):
        requests: list[ParsedRequest] = []
        ts = 1_600_000_000_000 + user  # fixed epoch keeps corpora reproducible
        for round_no in range(start_round, start_round + rounds):
            for endpoint_idx, endpoint in enumerate(spec.endpoints):
                sources = {
                    k.name: _ValueSource(spec, k, user, f"{seed}|r{round_no}" if k.behavior == PER_REQUEST_RANDOM else seed, endpoint_idx)
                    for k in endpoint.keys
                }
                path = endpoint.path
                if endpoint.random_path_token:
                    token_rng = random.Random(f"{seed}|{endpoint_idx}|path|user{user}|r{round_no}")
                    path = endpoint.path.rstrip("/") + f"/{token_rng.getrandbits(64):016x}"
                sid = SID(spec.package, spec.version, endpoint.method, endpoint.host, path)
                for key_spec in endpoint.keys:
                    labels[(sid, key_spec.name)] = BEHAVIOR_LABELS[key_spec.behavior]
                count = (
                    endpoint.requests_per_round
                    if endpoint.requests_per_round is not None
                    else requests_per_user
                )
                for _ in range(count):
                    ts += 137
                    values = {k.name: sources[k.name].next(ts) for k in endpoint.keys}
                    requests.append(_build_request(spec, endpoint, path, values, ts))
        traces.append(requests)
    return LabeledCorpus(traces=traces, labels=labels)


@dataclass
class Score:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def metrics_from_counts(tp: int, fp: int, fn: int) -> Score:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Score(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1)


def score(
    classifications: list[Classification],
    labels: dict[tuple[SID, str], str],
) -> Score:
    """Standard precision/recall over unique (SID, key, value) tuples.

    A PII-labeled tuple that never received a LikelyPII verdict (including
    InsufficientData) counts as a false negative.
    """
    tp = fp = fn = 0
    seen: set[tuple[SID, str, str]] = set()
    for cls in classifications:
        tup = (cls.sid, cls.key, cls.value)
        if tup in seen:
            continue
        seen.add(tup)
        truth = labels.get((cls.sid, cls.key))
        if cls.verdict == LIKELY_PII:
            if truth == LIKELY_PII:
                tp += 1
            else:
                fp += 1
        elif truth == LIKELY_PII:
            fn += 1
    return metrics_from_counts(tp, fp, fn)


def build_private_store(
    trace: list[ParsedRequest], generalize_paths: bool = False
) -> SignatureStore:
    store = SignatureStore(generalize_paths=generalize_paths)
    for req in trace:
        store.update(req, extract_kv(req))
    return store


def build_public_store(private_stores: list[SignatureStore]) -> SignatureStore:
    """Offline merge of every user's signatures, each user counted once."""
    public = SignatureStore(kind="public")
    for store in private_stores:
        for sig in store.all():
            public.merge_upload(sig, count_user=True)
    return public


def classify_corpus(
    corpus: LabeledCorpus,
    cfg: ClassifierConfig,
    public: SignatureStore | None = None,
    private_stores: list[SignatureStore] | None = None,
) -> list[Classification]:
    """Classify every user's unique tuples against the crowd signatures."""
    if private_stores is None:
        private_stores = [build_private_store(t) for t in corpus.traces]
    if public is None:
        public = build_public_store(private_stores)
    out: list[Classification] = []
    emitted: set[tuple[SID, str, str]] = set()
    for trace, private in zip(corpus.traces, private_stores):
        for req in trace:
            for cls in classify_request(req, private, public, cfg):
                tup = (cls.sid, cls.key, cls.value)
                if tup not in emitted:
                    emitted.add(tup)
                    out.append(cls)
    return out


def evaluate_corpus(corpus: LabeledCorpus, cfg: ClassifierConfig) -> Score:
    return score(classify_corpus(corpus, cfg), corpus.labels)


def sweep_threshold(
    corpus: LabeledCorpus,
    ct_values: list[int],
    t: float = 0.95,
) -> list[tuple[int, float, float]]:
    """(CT, precision, recall) over a grid; signatures built once."""
    private_stores = [build_private_store(t_) for t_ in corpus.traces]
    public = build_public_store(private_stores)
    rows = []
    for ct in ct_values:
        cfg = ClassifierConfig(t=t, ct=ct)
        s = score(
            classify_corpus(corpus, cfg, public=public, private_stores=private_stores),
            corpus.labels,
        )
        rows.append((ct, s.precision, s.recall))
    return rows


def training_rounds(
    spec: AppSpec,
    rounds: int,
    seed=0,
    users: int = 4,
    requests_per_user: int = 10,
    cfg: ClassifierConfig | None = None,
) -> list[float]:
    """Precision after each cumulative training round.

    Mirrors the incremental-training methodology: training users add a
    fresh round of traffic and upload only the new round's signatures; the
    held-out test device also runs once per round, accumulating private
    state, and the current round's test traffic is re-classified each time.
    Defaults to CT=1 so that one-shot noise is visible in round one.
    """
    if cfg is None:
        cfg = ClassifierConfig(ct=1)
    public = SignatureStore(kind="public")
    test_private = SignatureStore()
    series: list[float] = []
    for round_no in range(rounds):
        # users 0..users-1 train and upload; the last user is the held-out
        # test device. Labels cover both, including per-round token paths.
        round_corpus = generate(
            spec, users + 1, requests_per_user, seed=seed, rounds=1, start_round=round_no
        )
        for trace in round_corpus.traces[:users]:
            store = build_private_store(trace)
            for sig in store.all():
                public.merge_upload(sig, count_user=round_no == 0)
        test_trace = round_corpus.traces[users]
        for req in test_trace:
            test_private.update(req, extract_kv(req))
        classifications: list[Classification] = []
        emitted: set[tuple[SID, str, str]] = set()
        for req in test_trace:
            for cls in classify_request(req, test_private, public, cfg):
                tup = (cls.sid, cls.key, cls.value)
                if tup not in emitted:
                    emitted.add(tup)
                    classifications.append(cls)
        series.append(score(classifications, round_corpus.labels).precision)
    return series
