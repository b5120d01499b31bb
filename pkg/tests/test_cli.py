"""End-to-end command flows: simulate -> analyze -> score, config, marking."""

import json

import pytest

from ppx.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from ppx.filtering import RuleSet
from ppx.proxy import detection_id
from ppx.signature import SID

from helpers import noisy_app_spec


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(noisy_app_spec().to_obj()), encoding="utf-8")
    return path


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_simulate_analyze_score_round_trip(tmp_path, spec_file, capsys):
    out_dir = tmp_path / "corpus"
    code, out, err = run(
        [
            "simulate",
            "--spec", str(spec_file),
            "--users", "4",
            "--requests", "12",
            "--seed", "9",
            "--out", str(out_dir),
        ],
        capsys,
    )
    assert code == EXIT_OK
    assert "wrote 4 traces" in out
    assert (out_dir / "labels.jsonl").exists()

    # crowd signatures: merge all four users via a signatures file
    from ppx import signature as sig_mod
    from ppx.http_request import read_trace_file
    from ppx.simkit import build_private_store, build_public_store

    stores = [
        build_private_store(read_trace_file(out_dir / f"user_{i:02d}.jsonl"))
        for i in range(4)
    ]
    public_path = tmp_path / "public.jsonl"
    sig_mod.write_signature_file(public_path, build_public_store(stores).all())

    report_path = tmp_path / "report.jsonl"
    code, out, err = run(
        [
            "analyze",
            "--traces", str(out_dir),
            "--public", str(public_path),
            "--out", str(report_path),
        ],
        capsys,
    )
    assert code == EXIT_OK
    assert "LikelyPII" in out
    assert "bodies seen" in out
    assert report_path.exists()

    code, out, err = run(
        ["score", "--report", str(report_path), "--labels", str(out_dir / "labels.jsonl")],
        capsys,
    )
    assert code == EXIT_OK
    assert "precision" in out
    row = out.strip().splitlines()[-1].split()
    precision, recall = float(row[3]), float(row[4])
    assert precision == 1.0
    assert recall == 1.0


def test_analyze_bundled_sample_reports_unparsed_fraction(capsys):
    from pathlib import Path

    sample = Path(__file__).resolve().parent.parent / "sample" / "traces.jsonl"
    code, out, err = run(["analyze", "--traces", str(sample)], capsys)
    assert code == EXIT_OK
    assert "bodies seen: 10, unparseable: 2 (20.00%)" in out
    assert "io.acme.weather" in out


def test_analyze_empty_trace_file(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    report = tmp_path / "report.jsonl"
    code, out, err = run(
        ["analyze", "--traces", str(empty), "--out", str(report)], capsys
    )
    assert code == EXIT_OK
    assert report.read_text() == ""


def test_analyze_bad_trace_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("this is not json\n", encoding="utf-8")
    code, out, err = run(["analyze", "--traces", str(bad)], capsys)
    assert code == EXIT_DATA
    assert "error" in err


def test_print_config_resolution(tmp_path, capsys):
    config_file = tmp_path / "cfg.json"
    config_file.write_text(json.dumps({"ct": 5, "t": 0.9}), encoding="utf-8")
    code, out, err = run(
        [
            "analyze",
            "--traces", "unused",
            "--config", str(config_file),
            "--ct", "7",
            "--print-config",
        ],
        capsys,
    )
    assert code == EXIT_OK
    resolved = json.loads(out)
    assert resolved["ct"] == 7  # flag beats config file
    assert resolved["t"] == 0.9  # config file beats default
    assert resolved["fastpath_min"] == 500  # default


def test_usage_error_exit_code(capsys):
    assert main(["analyze"]) == EXIT_USAGE  # missing --traces
    assert main(["nonsense"]) == EXIT_USAGE


def test_mark_and_report(tmp_path, capsys):
    sid = SID("io.example.app", "1.0", "GET", "h.example.io", "/v1")
    rules = RuleSet()
    rules.get_or_create(sid, "U:device_id")
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    rules.save(data_dir / "rules.jsonl")
    did = detection_id(sid, "U:device_id")

    code, out, err = run(
        ["mark", "--data", str(data_dir), "--id", did, "--label", "pii", "--filter", "on"],
        capsys,
    )
    assert code == EXIT_OK
    assert "label=pii" in out and "filter=on" in out

    code, out, err = run(["report", "--data", str(data_dir)], capsys)
    assert code == EXIT_OK
    assert did in out
    assert "pii" in out

    # relabeling not_pii disables the filter (rule invariant)
    code, out, err = run(
        ["mark", "--data", str(data_dir), "--id", did, "--label", "not_pii"], capsys
    )
    assert code == EXIT_OK
    again = RuleSet.load(data_dir / "rules.jsonl")
    rule = again.get(sid, "U:device_id")
    assert rule.label == "not_pii"
    assert rule.filter_enabled is False


def test_mark_unknown_id(tmp_path, capsys):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    RuleSet().save(data_dir / "rules.jsonl")
    code, out, err = run(
        ["mark", "--data", str(data_dir), "--id", "feedfeedfeed", "--label", "pii"],
        capsys,
    )
    assert code == EXIT_DATA


def test_report_empty_store(tmp_path, capsys):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    code, out, err = run(["report", "--data", str(data_dir)], capsys)
    assert code == EXIT_OK
    assert "apps:" in out  # headers only


def test_export(tmp_path, capsys):
    from ppx import signature as sig_mod
    from ppx.extract import KeyValue
    from ppx.signature import Signature

    data_dir = tmp_path / "data"
    data_dir.mkdir()
    sig = Signature(SID("p", "1", "GET", "h", "/"))
    sig.update([KeyValue("U:k", "v")])
    sig_mod.write_signature_file(data_dir / "private_signatures.jsonl", [sig])
    out_path = tmp_path / "exported.jsonl"
    code, out, err = run(
        ["export", "--data", str(data_dir), "--what", "private", "--out", str(out_path)],
        capsys,
    )
    assert code == EXIT_OK
    assert sig_mod.read_signature_file(out_path) == [sig]


def test_score_published_triple_arithmetic(tmp_path, capsys):
    # hand-built report reproducing a published counts row: 92 TP, 24 FP
    sid = SID("app", "1", "GET", "h", "/x")
    labels_path = tmp_path / "labels.jsonl"
    report_path = tmp_path / "report.jsonl"
    with open(labels_path, "w") as fh:
        fh.write(json.dumps({"sid": sid.to_obj(), "key": "U:pii", "label": "LikelyPII"}) + "\n")
        fh.write(json.dumps({"sid": sid.to_obj(), "key": "U:ok", "label": "ContextSensitive"}) + "\n")
    with open(report_path, "w") as fh:
        for i in range(92):
            fh.write(json.dumps({"sid": sid.to_obj(), "key": "U:pii", "value_hashed": f"t{i}", "verdict": "LikelyPII"}) + "\n")
        for i in range(24):
            fh.write(json.dumps({"sid": sid.to_obj(), "key": "U:ok", "value_hashed": f"f{i}", "verdict": "LikelyPII"}) + "\n")
    code, out, err = run(
        ["score", "--report", str(report_path), "--labels", str(labels_path)], capsys
    )
    assert code == EXIT_OK
    row = out.strip().splitlines()[-1].split()
    assert row[0] == "92" and row[1] == "24"
    assert float(row[3]) == pytest.approx(0.793, abs=1e-3)
    assert float(row[5]) == pytest.approx(0.885, abs=1e-3)
