"""Command-line entry point.

Subcommands: analyze, proxy, server, simulate, score, mark, report, export.
Exit codes: 0 ok, 1 usage error, 2 data error, 3 network error.
"""

from __future__ import annotations

import argparse
import json
import sys
import urllib.error
from pathlib import Path

from . import signature as sig_mod
from .analysis import analyze_files, summary_tables, write_report
from .classify import ClassifierConfig
from .config import Config
from .errors import DecodeError, MalformedRequest, PpxError
from .filtering import RuleSet
from .reporting import render_table
from .signature import SignatureStore

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NETWORK = 3


def _load_config(args) -> Config:
    cfg = Config()
    if getattr(args, "config", None):
        cfg = Config.load(args.config)
    overrides = {}
    for name in (
        "t",
        "ct",
        "fastpath_min",
        "fastpath_max",
        "resample_probability",
        "resample_budget",
        "crash_threshold",
        "min_upload_observations",
        "server_url",
        "data_dir",
        "inline_budget_ms",
        "sync_interval_s",
        "path_generalize",
        "seed",
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return cfg.merged(overrides)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--t", type=float, dest="t", help="probability threshold T")
    parser.add_argument("--ct", type=int, dest="ct", help="confidence threshold CT")
    parser.add_argument("--fastpath-min", type=int, dest="fastpath_min")
    parser.add_argument("--fastpath-max", type=int, dest="fastpath_max")
    parser.add_argument("--resample-probability", type=float, dest="resample_probability")
    parser.add_argument("--resample-budget", type=int, dest="resample_budget")
    parser.add_argument("--crash-threshold", type=int, dest="crash_threshold")
    parser.add_argument("--min-upload-observations", type=int, dest="min_upload_observations")
    parser.add_argument("--server-url", dest="server_url")
    parser.add_argument("--data", dest="data_dir", help="state directory")
    parser.add_argument("--inline-budget-ms", type=int, dest="inline_budget_ms")
    parser.add_argument("--sync-interval-s", type=float, dest="sync_interval_s")
    parser.add_argument(
        "--path-generalize",
        action="store_true",
        dest="path_generalize",
        default=None,
        help="collapse long hex path segments into '*' when grouping requests",
    )
    parser.add_argument("--seed", type=int, dest="seed")
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="print the fully resolved configuration and exit",
    )


def _maybe_print_config(args, cfg: Config) -> bool:
    if getattr(args, "print_config", False):
        print(cfg.to_json())
        return True
    return False


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    trace_paths = []
    for item in args.traces:
        path = Path(item)
        if path.is_dir():
            trace_paths.extend(sorted(path.glob("*.jsonl")))
        else:
            trace_paths.append(path)
    trace_paths = [p for p in trace_paths if p.name != "labels.jsonl"]
    try:
        classifications, stats = analyze_files(
            trace_paths,
            args.public or "",
            ClassifierConfig(t=cfg.t, ct=cfg.ct),
            generalize_paths=cfg.path_generalize,
        )
    except (MalformedRequest, DecodeError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except urllib.error.URLError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    if args.out:
        write_report(args.out, classifications)
    print(summary_tables(classifications, stats))
    return EXIT_OK


def cmd_proxy(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    from .proxy import AppBindings, Proxy
    from .tlsmitm import CertAuthority

    ca_base = Path(args.ca)
    ca = CertAuthority(ca_base.with_suffix(".crt"), ca_base.with_suffix(".key"))
    bindings = AppBindings.load(args.apps) if args.apps else AppBindings()
    proxy = Proxy(
        listen=args.listen,
        ca=ca,
        bindings=bindings,
        cfg=cfg,
        admin_listen=args.admin_listen,
        dashboard_dir=args.dashboard,
    )
    proxy.start()
    print(f"proxy listening on {args.listen}", file=sys.stderr)
    try:
        import threading

        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        proxy.stop()
    return EXIT_OK


def cmd_server(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    from .server import serve

    print(f"signature server listening on {args.listen}", file=sys.stderr)
    serve(args.listen, cfg.data_dir or None, block=True)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    from .simkit import AppSpec, generate

    try:
        spec = AppSpec.load(args.spec)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: bad app spec: {exc}", file=sys.stderr)
        return EXIT_DATA
    corpus = generate(spec, args.users, args.requests, seed=args.seed or 0, rounds=args.rounds)
    corpus.save(args.out)
    total = sum(len(t) for t in corpus.traces)
    print(f"wrote {len(corpus.traces)} traces ({total} requests) to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    from .classify import LIKELY_PII
    from .signature import SID
    from .simkit import LabeledCorpus, metrics_from_counts

    labels = LabeledCorpus.load_labels(args.labels)
    tp = fp = fn = 0
    seen = set()
    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                sid = SID.from_obj(row["sid"])
                tup = (sid, row["key"], row["value_hashed"])
                if tup in seen:
                    continue
                seen.add(tup)
                truth = labels.get((sid, row["key"]))
                if row["verdict"] == LIKELY_PII:
                    if truth == LIKELY_PII:
                        tp += 1
                    else:
                        fp += 1
                elif truth == LIKELY_PII:
                    fn += 1
    except (OSError, json.JSONDecodeError, KeyError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    s = metrics_from_counts(tp, fp, fn)
    print(
        render_table(
            ["tp", "fp", "fn", "precision", "recall", "f1"],
            [[s.tp, s.fp, s.fn, f"{s.precision:.3f}", f"{s.recall:.3f}", f"{s.f1:.3f}"]],
        )
    )
    return EXIT_OK


def _load_rules(data_dir: str) -> tuple[RuleSet, Path]:
    rules_path = Path(data_dir) / "rules.jsonl"
    rules = RuleSet.load(rules_path) if rules_path.exists() else RuleSet()
    return rules, rules_path


def cmd_mark(args) -> int:
    from .proxy import detection_id

    data_dir = args.data_dir
    if not data_dir:
        print("error: --data is required", file=sys.stderr)
        return EXIT_USAGE
    rules, rules_path = _load_rules(data_dir)
    target = None
    for rule in rules.all():
        if detection_id(rule.sid, rule.key) == args.id:
            target = rule
            break
    if target is None:
        detections_path = Path(data_dir) / "detections.jsonl"
        if detections_path.exists():
            with open(detections_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    obj = json.loads(line)
                    if obj.get("id") == args.id:
                        from .signature import SID

                        target = rules.get_or_create(SID.from_obj(obj["sid"]), obj["key"])
                        break
    if target is None:
        print(f"error: unknown detection id {args.id}", file=sys.stderr)
        return EXIT_DATA
    target.set_label(args.label)
    if args.filter is not None:
        try:
            target.set_filter(args.filter == "on")
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    rules.save(rules_path)
    print(f"{args.id}: label={target.label} filter={'on' if target.filter_enabled else 'off'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .proxy import detection_id

    data_dir = Path(args.data_dir or ".")
    rules, _ = _load_rules(str(data_dir))
    sig_path = data_dir / "private_signatures.jsonl"
    store = SignatureStore()
    if sig_path.exists():
        for sig in sig_mod.read_signature_file(sig_path):
            store.put(sig)
    apps: dict[tuple[str, str], dict] = {}
    for sig in store.all():
        entry = apps.setdefault(
            (sig.sid.package, sig.sid.version), {"sids": 0, "keys": 0}
        )
        entry["sids"] += 1
        entry["keys"] += len(sig.keys)
    print("apps:")
    print(
        render_table(
            ["app", "version", "sids", "keys"],
            [[a, v, e["sids"], e["keys"]] for (a, v), e in sorted(apps.items())],
        )
    )
    print()
    print("rules:")
    print(
        render_table(
            ["id", "app", "key", "label", "filter", "status", "streak"],
            [
                [
                    detection_id(r.sid, r.key),
                    r.sid.package,
                    r.key,
                    r.label,
                    "on" if r.filter_enabled else "off",
                    r.status,
                    r.failure_streak,
                ]
                for r in sorted(rules.all(), key=lambda r: (r.sid, r.key))
            ],
        )
    )
    whitelist_path = data_dir / "whitelist_cache.json"
    if whitelist_path.exists():
        obj = json.loads(whitelist_path.read_text(encoding="utf-8"))
        print()
        print("whitelisted apps:")
        print(render_table(["app", "version"], [list(a) for a in obj.get("apps", [])]))
    return EXIT_OK


def cmd_export(args) -> int:
    data_dir = Path(args.data_dir or ".")
    which = args.what
    path = data_dir / f"{which}_signatures.jsonl"
    if not path.exists():
        print(f"error: {path} does not exist", file=sys.stderr)
        return EXIT_DATA
    sigs = sig_mod.read_signature_file(path)
    sig_mod.write_signature_file(args.out, sigs)
    print(f"exported {len(sigs)} signatures to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppx",
        description="Crowd-sourced PII leak detection and scrubbing for HTTP(S) traffic",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="classify key-value pairs in offline traces")
    p.add_argument("--traces", nargs="+", required=True, help="trace files or directories")
    p.add_argument("--public", help="public signatures: JSONL file or server URL")
    p.add_argument("--out", help="write a JSON-Lines report here")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("proxy", help="run the intercepting forward proxy")
    p.add_argument("--listen", required=True, help="addr:port for the proxy listener")
    p.add_argument("--ca", required=True, help="CA path base (.crt/.key created if absent)")
    p.add_argument("--apps", help="app bindings JSON file")
    p.add_argument("--admin-listen", help="addr:port for the admin API")
    p.add_argument("--dashboard", help="directory of built dashboard assets")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_proxy)

    p = sub.add_parser("server", help="run the signature aggregation server")
    p.add_argument("--listen", required=True, help="addr:port to serve on")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_server)

    p = sub.add_parser("simulate", help="generate a labeled synthetic corpus")
    p.add_argument("--spec", required=True, help="app spec JSON file")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--requests", type=int, required=True, help="requests per endpoint per user")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("score", help="score a report against corpus labels")
    p.add_argument("--report", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("mark", help="label a detection and toggle its filter")
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--id", required=True, help="detection id")
    p.add_argument("--label", required=True, choices=["pii", "not_pii", "unsure"])
    p.add_argument("--filter", choices=["on", "off"])
    p.set_defaults(fn=cmd_mark)

    p = sub.add_parser("report", help="print apps, detections, rules, whitelist")
    p.add_argument("--data", dest="data_dir", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("export", help="export a signature store to JSONL")
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--what", choices=["private", "public"], default="private")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except PpxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
