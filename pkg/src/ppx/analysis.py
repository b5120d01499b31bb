"""Offline analysis: build signatures from trace files and classify.

Each trace file stands for one device. Its requests build that device's
private signatures; classification of the device's unique tuples then runs
against public signatures loaded from a file or fetched from a server.
"""

from __future__ import annotations

import json
import urllib.request

from . import signature as sig_mod
from .classify import LIKELY_PII, Classification, ClassifierConfig, classify_request
from .extract import ExtractionStats, extract_kv
from .http_request import ParsedRequest, read_trace_file
from .reporting import render_table, taxonomy_of
from .signature import SID, SignatureStore


def load_public_signatures(source: str, packages: set[tuple[str, str]]) -> SignatureStore:
    """Public store from a JSONL file path or a server base URL."""
    store = SignatureStore(kind="public")
    if source.startswith(("http://", "https://")):
        for package, version in sorted(packages):
            url = f"{source.rstrip('/')}/api/v1/signatures?package={package}&version={version}"
            with urllib.request.urlopen(url, timeout=15) as resp:
                obj = json.loads(resp.read())
            for sig_obj in obj.get("signatures", []):
                store.put(sig_mod.from_obj(sig_obj))
    elif source:
        for sig in sig_mod.read_signature_file(source):
            store.put(sig)
    return store


def analyze_device(
    trace: list[ParsedRequest],
    public: SignatureStore,
    cfg: ClassifierConfig,
    stats: ExtractionStats | None = None,
    generalize_paths: bool = False,
) -> list[Classification]:
    """Classifications of every unique (SID, key, value) tuple in one trace."""
    private = SignatureStore(generalize_paths=generalize_paths)
    for req in trace:
        private.update(req, extract_kv(req, stats))
    out: list[Classification] = []
    emitted: set[tuple[SID, str, str]] = set()
    for req in trace:
        for cls in classify_request(req, private, public, cfg):
            tup = (cls.sid, cls.key, cls.value)
            if tup not in emitted:
                emitted.add(tup)
                out.append(cls)
    return out


def analyze_files(
    trace_paths: list,
    public_source: str,
    cfg: ClassifierConfig,
    generalize_paths: bool = False,
) -> tuple[list[Classification], ExtractionStats]:
    traces = [read_trace_file(p) for p in trace_paths]
    packages = {
        (req.app, req.app_version) for trace in traces for req in trace
    }
    public = load_public_signatures(public_source, packages)
    stats = ExtractionStats()
    out: list[Classification] = []
    for trace in traces:
        out.extend(analyze_device(trace, public, cfg, stats, generalize_paths))
    return out, stats


def write_report(path, classifications: list[Classification]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cls in classifications:
            fh.write(cls.to_json() + "\n")


def summary_tables(classifications: list[Classification], stats: ExtractionStats) -> str:
    """Human-readable run summary: verdicts per app plus the PII taxonomy."""
    verdict_rows: dict[tuple[str, str], dict[str, int]] = {}
    taxonomy_rows: dict[tuple[str, str], dict[str, int]] = {}
    for cls in classifications:
        app = (cls.sid.package, cls.sid.version)
        verdict_rows.setdefault(app, {})
        verdict_rows[app][cls.verdict] = verdict_rows[app].get(cls.verdict, 0) + 1
        if cls.verdict == LIKELY_PII:
            bucket = taxonomy_of(cls.key, cls.value)
            taxonomy_rows.setdefault(app, {})
            taxonomy_rows[app][bucket] = taxonomy_rows[app].get(bucket, 0) + 1
    sections = []
    verdict_names = ["LikelyPII", "ApplicationConstant", "ContextSensitive", "InsufficientData"]
    rows = [
        [app, version] + [counts.get(v, 0) for v in verdict_names]
        for (app, version), counts in sorted(verdict_rows.items())
    ]
    sections.append(render_table(["app", "version"] + verdict_names, rows))
    if taxonomy_rows:
        buckets = ["standard_ids", "location", "app_generated_ids", "other"]
        rows = [
            [app, version] + [counts.get(b, 0) for b in buckets]
            for (app, version), counts in sorted(taxonomy_rows.items())
        ]
        sections.append("PII taxonomy (unique tuples):")
        sections.append(render_table(["app", "version"] + buckets, rows))
    sections.append(
        f"bodies seen: {stats.bodies_seen}, unparseable: {stats.bodies_unparsed} "
        f"({stats.unparsed_fraction():.2%})"
    )
    return "\n\n".join(sections)
