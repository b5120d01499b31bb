"""Signature identity, update/merge laws, wire encoding."""

import json
import random
from collections import Counter

import pytest

from ppx import signature as sig_mod
from ppx.errors import DecodeError, ShapeMismatch, SidMismatch
from ppx.extract import KeyValue, extract_kv
from ppx.signature import (
    SID,
    Signature,
    SignatureStore,
    decode,
    encode,
    merge_signature,
    read_signature_file,
    sid_of,
    write_signature_file,
)

from helpers import make_request


def test_sid_of_paper_example():
    req = make_request(
        method="GET",
        path="/api/v1",
        query=[("x", "1")],
        app="io.example.app",
        version="1.0",
        host="www.example.io",
    )
    assert sid_of(req) == SID("io.example.app", "1.0", "GET", "www.example.io", "/api/v1")


def test_sid_host_lowercased():
    req = make_request(host="WWW.Example.IO")
    assert sid_of(req).host == "www.example.io"


def test_sid_ignores_query():
    a = make_request(query=[("x", "1")])
    b = make_request(query=[("y", "2"), ("z", "3")])
    assert sid_of(a) == sid_of(b)


def test_sid_partitions_on_every_field():
    base = dict(package="p", version="1", method="GET", host="h", path="/x")
    sid = SID(**base)
    for field, other in [
        ("package", "q"),
        ("version", "2"),
        ("method", "POST"),
        ("host", "h2"),
        ("path", "/y"),
    ]:
        assert sid != SID(**{**base, field: other})


def test_sid_validation():
    with pytest.raises(ValueError):
        SID("", "1", "GET", "h", "/")
    with pytest.raises(ValueError):
        SID("p", "1", "GET", "h", "nope")


def test_update_creates_sketches():
    sig = Signature(SID("p", "1", "GET", "h", "/"))
    sig.update([KeyValue("U:id", "x")])
    assert set(sig.keys) == {"U:id"}
    assert sig.keys["U:id"].m == 1


def test_update_counts_match_oracle(rng):
    sig = Signature(SID("p", "1", "GET", "h", "/"))
    kvs = [
        KeyValue(f"U:k{rng.randrange(4)}", f"v{rng.randrange(6)}")
        for _ in range(300)
    ]
    sig.update(kvs)
    per_key = Counter(kv.key for kv in kvs)
    exact = Counter((kv.key, kv.value) for kv in kvs)
    for key, count in per_key.items():
        assert sig.keys[key].m == count
    for (key, value), count in exact.items():
        assert sig.keys[key].count(value.encode()) >= count


def test_update_duplicate_keys_both_increment():
    sig = Signature(SID("p", "1", "GET", "h", "/"))
    sig.update([KeyValue("U:t", "1"), KeyValue("U:t", "2")])
    assert sig.keys["U:t"].m == 2


def test_update_order_insensitive(rng):
    kvs = [KeyValue(f"U:k{i % 3}", f"v{i % 7}") for i in range(100)]
    shuffled = kvs[:]
    rng.shuffle(shuffled)
    a = Signature(SID("p", "1", "GET", "h", "/"))
    b = Signature(SID("p", "1", "GET", "h", "/"))
    a.update(kvs)
    b.update(shuffled)
    assert a == b


def test_merge_disjoint_keys_union():
    sid = SID("p", "1", "GET", "h", "/")
    pub = Signature(sid, "public")
    pub.update([KeyValue("U:a", "1")])
    priv = Signature(sid)
    priv.update([KeyValue("U:b", "2")])
    merged = merge_signature(pub, priv)
    assert set(merged.keys) == {"U:a", "U:b"}


def test_merge_empty_private_changes_nothing_but_accounting():
    sid = SID("p", "1", "GET", "h", "/")
    pub = Signature(sid, "public", user_count=3)
    pub.update([KeyValue("U:a", "1")])
    merged = merge_signature(pub, Signature(sid), count_user=True)
    assert merged.keys == pub.keys
    assert merged.user_count == 4


def test_merge_equals_concatenated_updates(rng):
    sid = SID("p", "1", "GET", "h", "/")
    kvs1 = [KeyValue("U:k", f"v{rng.randrange(5)}") for _ in range(80)]
    kvs2 = [KeyValue("U:k", f"v{rng.randrange(5)}") for _ in range(40)]
    a = Signature(sid, "public")
    a.update(kvs1)
    b = Signature(sid)
    b.update(kvs2)
    both = Signature(sid, "public")
    both.update(kvs1 + kvs2)
    merged = merge_signature(a, b)
    assert merged.keys["U:k"] == both.keys["U:k"]


def test_merge_sid_mismatch():
    with pytest.raises(SidMismatch):
        merge_signature(
            Signature(SID("p", "1", "GET", "h", "/"), "public"),
            Signature(SID("q", "1", "GET", "h", "/")),
        )


def _random_signature(rng):
    sid = SID(
        package=f"app{rng.randrange(40)}",
        version=f"{rng.randrange(3)}.0",
        method=rng.choice(["GET", "POST"]),
        host=f"h{rng.randrange(9)}.example.io",
        path=f"/p{rng.randrange(20)}",
    )
    sig = Signature(sid, rng.choice(["private", "public"]))
    sig.user_count = rng.randrange(1, 9)
    for _ in range(rng.randrange(1, 5)):
        prefix = rng.choice(["U:", "H:", "B:"])
        key = prefix + f"k{rng.randrange(90)}"
        sig.update(
            [KeyValue(key, f"v{rng.getrandbits(24)}") for _ in range(rng.randrange(1, 30))]
        )
    return sig


def test_encode_decode_round_trip_fuzz(rng):
    for _ in range(1000):
        sig = _random_signature(rng)
        assert decode(encode(sig)) == sig


def test_decode_truncated_raises_with_position():
    data = encode(_random_signature(random.Random(5)))
    with pytest.raises(DecodeError) as err:
        decode(data[: len(data) - 10])
    assert "offset" in str(err.value)


def test_decode_wrong_geometry_is_shape_mismatch():
    sig = _random_signature(random.Random(6))
    obj = sig_mod.to_obj(sig)
    key = next(iter(obj["keys"]))
    obj["keys"][key]["r"] = 4
    obj["keys"][key]["rows"] = obj["keys"][key]["rows"][:4]
    with pytest.raises(ShapeMismatch):
        sig_mod.from_obj(obj)


def test_decode_rejects_bad_key_grammar():
    sig = Signature(SID("p", "1", "GET", "h", "/"))
    sig.update([KeyValue("U:ok", "v")])
    obj = sig_mod.to_obj(sig)
    obj["keys"]["nope"] = obj["keys"].pop("U:ok")
    with pytest.raises(DecodeError):
        sig_mod.from_obj(obj)


def test_wire_format_shape():
    sig = Signature(SID("p", "1", "GET", "h", "/"), "public", user_count=2)
    sig.update([KeyValue("U:id", "x")])
    obj = json.loads(encode(sig))
    assert obj["kind"] == "public"
    assert obj["user_count"] == 2
    assert obj["sid"] == {"package": "p", "version": "1", "method": "GET", "host": "h", "path": "/"}
    assert obj["keys"]["U:id"]["r"] == 5


def test_signature_file_round_trip(tmp_path, rng):
    sigs = [_random_signature(rng) for _ in range(20)]
    path = tmp_path / "sigs.jsonl"
    write_signature_file(path, sigs)
    again = read_signature_file(path)
    assert again == sigs


def test_generalize_path():
    from ppx.signature import generalize_path

    assert (
        generalize_path("/api/v1/11828d55da4547b5b7bd85eef33c38a0/cpu")
        == "/api/v1/*/cpu"
    )
    assert generalize_path("/api/v1") == "/api/v1"
    assert generalize_path("/deadbeef") == "/deadbeef"  # 8 hex chars: too short
    assert generalize_path("/") == "/"


def test_sid_of_with_generalization():
    req = make_request(path="/obj/0123456789abcdef0123456789abcdef")
    assert sid_of(req).path == "/obj/0123456789abcdef0123456789abcdef"
    assert sid_of(req, generalize_paths=True).path == "/obj/*"


def test_store_updates_same_sid_together():
    store = SignatureStore()
    r1 = make_request(query=[("id", "x")])
    r2 = make_request(query=[("id", "x"), ("other", "y")])
    store.update(r1, extract_kv(r1))
    store.update(r2, extract_kv(r2))
    assert len(store) == 1
    sig = store.get(sid_of(r1))
    assert sig.keys["U:id"].count(b"x") == 2
