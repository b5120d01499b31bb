"""Upload accounting, whitelists, persistence, and the no-plaintext rule."""

import itertools
import json
import threading
import urllib.request

import pytest

from ppx import signature as sig_mod
from ppx.extract import KeyValue
from ppx.server import (
    ServerStore,
    build_api,
    serve,
    validate_telemetry,
    validate_token,
)
from ppx.signature import SID, Signature
from ppx.webutil import ApiServer

TOKEN_A = "aa" * 16
TOKEN_B = "bb" * 16

SID_1 = SID("io.example.app", "1.0", "GET", "api.example.io", "/v1/sync")


def make_sig(values, key="U:device_id", sid=SID_1):
    sig = Signature(sid)
    sig.update([KeyValue(key, v) for v in values])
    return sig


def sig_obj(values, key="U:device_id", sid=SID_1):
    return sig_mod.to_obj(make_sig(values, key, sid))


def telemetry_record(app="io.example.app", version="1.0", pii=0, crash=None):
    return {
        "app": app,
        "version": version,
        "requests_seen": 10,
        "pii_detected_count": pii,
        "user_marked_tp": 0,
        "user_marked_fp": 0,
        "protocol_counts": {"http": 2, "https": 8, "other": 0},
        "crash_reports": crash or [],
    }


# -- token and schema validation ---------------------------------------------------


def test_validate_token():
    assert validate_token(TOKEN_A)
    assert not validate_token("short")
    assert not validate_token("zz" * 16)
    assert not validate_token(1234)


def test_telemetry_schema_accepts_valid():
    assert validate_telemetry(telemetry_record()) is None


def test_telemetry_rejects_raw_values():
    bad = telemetry_record()
    bad["value"] = "leak@example.com"
    assert validate_telemetry(bad) is not None


def test_telemetry_rejects_missing_and_negative():
    record = telemetry_record()
    del record["requests_seen"]
    assert validate_telemetry(record) is not None
    record = telemetry_record()
    record["pii_detected_count"] = -1
    assert validate_telemetry(record) is not None


# -- upload accounting ----------------------------------------------------------------


def test_two_tokens_two_users():
    store = ServerStore()
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    store.upload_batch(TOKEN_B, [sig_obj(["y"] * 10)])
    pub = store.publics[SID_1]
    assert pub.user_count == 2
    assert pub.keys["U:device_id"].m == 20


def test_same_token_same_content_rejected():
    store = ServerStore()
    payload = sig_obj(["x"] * 10)
    accepted, _ = store.upload_batch(TOKEN_A, [payload])
    assert accepted == 1
    accepted, results = store.upload_batch(TOKEN_A, [payload])
    assert accepted == 0
    assert results[0]["status"] == "duplicate"
    pub = store.publics[SID_1]
    assert pub.user_count == 1
    assert pub.keys["U:device_id"].m == 10


def test_same_token_new_content_merges_without_user_increment():
    store = ServerStore()
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 12)])
    pub = store.publics[SID_1]
    assert pub.user_count == 1
    assert pub.keys["U:device_id"].m == 22


def test_min_observation_keys_dropped_not_batch():
    store = ServerStore()
    sig = Signature(SID_1)
    sig.update([KeyValue("U:rich", f"v{i % 3}") for i in range(15)])
    sig.update([KeyValue("U:thin", "once")])
    accepted, results = store.upload_batch(TOKEN_A, [sig_mod.to_obj(sig)])
    assert accepted == 1
    pub = store.publics[SID_1]
    assert "U:rich" in pub.keys
    assert "U:thin" not in pub.keys


def test_upload_all_thin_keys_rejected():
    store = ServerStore()
    accepted, results = store.upload_batch(TOKEN_A, [sig_obj(["only-once"])])
    assert accepted == 0
    assert results[0]["status"] == "rejected_min_observations"
    assert SID_1 not in store.publics


def test_merged_equals_union_stream():
    store = ServerStore()
    s1 = ["x"] * 10
    s2 = ["x"] * 5 + ["y"] * 7
    store.upload_batch(TOKEN_A, [sig_obj(s1)])
    store.upload_batch(TOKEN_B, [sig_obj(s2)])
    expected = make_sig(s1 + s2)
    assert store.publics[SID_1].keys["U:device_id"] == expected.keys["U:device_id"]


def test_upload_order_independence():
    batches = [
        (TOKEN_A, sig_obj(["x"] * 10)),
        (TOKEN_B, sig_obj(["y"] * 11)),
        ("cc" * 16, sig_obj(["z"] * 12)),
    ]
    snapshots = []
    for perm in itertools.permutations(batches):
        store = ServerStore()
        for token, payload in perm:
            store.upload_batch(token, [payload])
        pub = store.publics[SID_1]
        snapshots.append((pub.user_count, pub.keys["U:device_id"].to_json()))
    assert len(set(snapshots)) == 1


def test_retry_idempotence_counter_identical():
    store = ServerStore()
    payload = [sig_obj(["x"] * 10), sig_obj(["m"] * 10, key="B:meta.id")]
    store.upload_batch(TOKEN_A, payload)
    before = store.publics[SID_1].keys["U:device_id"].to_json()
    store.upload_batch(TOKEN_A, payload)  # network retry of acknowledged batch
    after = store.publics[SID_1].keys["U:device_id"].to_json()
    assert before == after


def test_bad_shape_reported_per_item():
    store = ServerStore()
    bad = sig_obj(["x"] * 10)
    bad["keys"]["U:device_id"]["r"] = 7
    bad["keys"]["U:device_id"]["rows"] = [[0] * 55] * 7
    good = sig_obj(["y"] * 10)
    accepted, results = store.upload_batch(TOKEN_A, [bad, good])
    assert accepted == 1
    assert results[0]["status"] == "shape_mismatch"
    assert results[1]["status"].startswith("accepted")


def test_download_unknown_app_empty():
    assert ServerStore().download("nope") == []


def test_download_round_trip_and_privacy():
    store = ServerStore()
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    sigs = store.download("io.example.app", "1.0")
    assert len(sigs) == 1
    obj = sig_mod.to_obj(sigs[0])
    assert obj["kind"] == "public"
    blob = json.dumps(obj)
    assert TOKEN_A not in blob
    assert "token" not in blob


# -- whitelists ------------------------------------------------------------------------


def test_whitelist_needs_five_clean_users():
    store = ServerStore()
    for i in range(5):
        store.ingest_telemetry(f"{i:02d}" * 16, telemetry_record())
    assert store.compute_whitelist() == [("io.example.app", "1.0")]


def test_whitelist_blocked_by_single_detection():
    store = ServerStore()
    for i in range(4):
        store.ingest_telemetry(f"{i:02d}" * 16, telemetry_record())
    store.ingest_telemetry("04" * 16, telemetry_record(pii=1))
    assert store.compute_whitelist() == []


def test_whitelist_four_users_not_enough():
    store = ServerStore()
    for i in range(4):
        store.ingest_telemetry(f"{i:02d}" * 16, telemetry_record())
    assert store.compute_whitelist() == []


def test_crash_whitelist_two_distinct_tokens():
    report = {"sid": SID_1.to_obj(), "key": "U:device_id", "status_class": "5xx"}
    store = ServerStore()
    store.ingest_telemetry(TOKEN_A, telemetry_record(crash=[report]))
    assert store.compute_crash_whitelist() == []
    store.ingest_telemetry(TOKEN_B, telemetry_record(crash=[report]))
    assert store.compute_crash_whitelist() == [(SID_1.to_obj(), "U:device_id")]


def test_crash_whitelist_one_token_many_reports():
    report = {"sid": SID_1.to_obj(), "key": "U:device_id", "status_class": "5xx"}
    store = ServerStore()
    for _ in range(10):
        store.ingest_telemetry(TOKEN_A, telemetry_record(crash=[report]))
    assert store.compute_crash_whitelist() == []


# -- persistence -----------------------------------------------------------------------


def test_journal_recovery(tmp_path):
    store = ServerStore(tmp_path)
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    store.ingest_telemetry(TOKEN_A, telemetry_record())
    store.close()
    again = ServerStore(tmp_path)
    assert again.publics[SID_1].keys["U:device_id"].count(b"x") >= 10
    assert again.publics[SID_1].user_count == 1
    assert len(again.telemetry) == 1


def test_compaction_preserves_state_and_empties_journal(tmp_path):
    store = ServerStore(tmp_path)
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    store.upload_batch(TOKEN_B, [sig_obj(["y"] * 10)])
    store.compact()
    assert (tmp_path / "journal.jsonl").read_text() == ""
    store.close()
    again = ServerStore(tmp_path)
    assert again.publics[SID_1].user_count == 2
    # dedup set survives compaction: the same retry is still rejected
    accepted, results = again.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    assert results[0]["status"] == "duplicate"


def test_no_plaintext_in_persisted_state(tmp_path):
    secrets = ["super-secret-device-id-1234", "alice@real.example", "10.99.88.77"]
    store = ServerStore(tmp_path)
    store.upload_batch(TOKEN_A, [sig_obj([secrets[0]] * 10)])
    store.upload_batch(TOKEN_B, [sig_obj([s for s in secrets for _ in range(4)])])
    store.ingest_telemetry(TOKEN_A, telemetry_record())
    store.compact()
    store.close()
    for path in tmp_path.rglob("*"):
        if path.is_file():
            blob = path.read_text(encoding="utf-8", errors="replace")
            for secret in secrets:
                assert secret not in blob, path
            assert TOKEN_A not in blob and TOKEN_B not in blob


def test_counter_payload_accounting(tmp_path):
    store = ServerStore(tmp_path)
    store.upload_batch(TOKEN_A, [sig_obj(["x"] * 10)])
    store.compact()
    store.close()
    snapshot = json.loads((tmp_path / "snapshot.json").read_text())
    for sig_item in snapshot["publics"]:
        sig = sig_mod.from_obj(sig_item)
        for key, sketch in sig.keys.items():
            assert len(sketch.counter_payload()) == 2200


# -- HTTP surface ----------------------------------------------------------------------


@pytest.fixture
def live_server(tmp_path):
    store = ServerStore(tmp_path)
    server = ApiServer("127.0.0.1", 0, build_api(store))
    server.start()
    base = f"http://127.0.0.1:{server.port}"
    yield base, store
    server.stop()
    store.close()


def _post(base, path, obj):
    req = urllib.request.Request(
        base + path,
        data=json.dumps(obj).encode(),
        headers={"Content-Type": "application/json"},
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read() or b"null")
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read() or b"null")


def _get(base, path):
    with urllib.request.urlopen(base + path) as resp:
        return resp.status, json.loads(resp.read())


def test_http_upload_download_cycle(live_server):
    base, _ = live_server
    status, body = _post(
        base,
        "/api/v1/signatures",
        {"install_token": TOKEN_A, "signatures": [sig_obj(["x"] * 10)]},
    )
    assert status == 200 and body["accepted"] == 1
    status, body = _get(base, "/api/v1/signatures?package=io.example.app&version=1.0")
    assert status == 200
    assert len(body["signatures"]) == 1
    assert body["signatures"][0]["user_count"] == 1


def test_http_bad_token_400(live_server):
    base, _ = live_server
    status, body = _post(base, "/api/v1/signatures", {"install_token": "nope", "signatures": []})
    assert status == 400


def test_http_telemetry_and_whitelists(live_server):
    base, _ = live_server
    for i in range(5):
        status, _ = _post(
            base,
            "/api/v1/telemetry",
            {"install_token": f"{i:02d}" * 16, "record": telemetry_record()},
        )
        assert status == 204
    status, body = _get(base, "/api/v1/whitelist")
    assert status == 200
    assert body["apps"] == [["io.example.app", "1.0"]]
    status, body = _get(base, "/api/v1/crash-whitelist")
    assert body["pairs"] == []


def test_http_telemetry_with_value_rejected(live_server):
    base, _ = live_server
    bad = telemetry_record()
    bad["value"] = "raw"
    status, body = _post(
        base, "/api/v1/telemetry", {"install_token": TOKEN_A, "record": bad}
    )
    assert status == 400


def test_concurrent_uploads_consistent(tmp_path):
    store = ServerStore(tmp_path)
    tokens = [f"{i:02x}" * 16 for i in range(8)]

    def upload(token, start):
        for i in range(5):
            store.upload_batch(
                token, [sig_obj([f"v{start}-{i}"] * 10)]
            )

    threads = [
        threading.Thread(target=upload, args=(token, idx))
        for idx, token in enumerate(tokens)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    pub = store.publics[SID_1]
    assert pub.user_count == 8
    assert pub.keys["U:device_id"].m == 8 * 5 * 10
    store.close()
