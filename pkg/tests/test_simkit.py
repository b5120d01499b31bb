"""Corpus generation determinism, scoring arithmetic, training dynamics."""

import json

import pytest

from ppx.classify import LIKELY_PII, ClassifierConfig
from ppx.http_request import to_trace_obj
from ppx.signature import SID
from ppx.simkit import (
    AppSpec,
    LabeledCorpus,
    evaluate_corpus,
    generate,
    metrics_from_counts,
    score,
    sweep_threshold,
    training_rounds,
)

from helpers import clean_app_spec, noisy_app_spec


def corpus_fingerprint(corpus):
    return json.dumps(
        [[to_trace_obj(r) for r in trace] for trace in corpus.traces], sort_keys=True
    )


def test_same_seed_identical_corpora():
    a = generate(clean_app_spec(), users=3, requests_per_user=5, seed=42)
    b = generate(clean_app_spec(), users=3, requests_per_user=5, seed=42)
    assert corpus_fingerprint(a) == corpus_fingerprint(b)
    assert a.labels == b.labels


def test_different_seed_differs():
    a = generate(clean_app_spec(), users=2, requests_per_user=5, seed=1)
    b = generate(clean_app_spec(), users=2, requests_per_user=5, seed=2)
    assert corpus_fingerprint(a) != corpus_fingerprint(b)


def test_per_user_constants_unique_per_user_and_stable():
    corpus = generate(clean_app_spec(), users=3, requests_per_user=6, seed=5)
    per_user = []
    for trace in corpus.traces:
        values = {
            v for req in trace for (n, v) in req.query if n == "device_id"
        }
        assert len(values) == 1  # stable within a user
        per_user.append(values.pop())
    assert len(set(per_user)) == 3  # unique across users


def test_labels_cover_every_generated_key():
    corpus = generate(noisy_app_spec(), users=2, requests_per_user=4, seed=6)
    from ppx.extract import extract_kv
    from ppx.signature import sid_of

    for trace in corpus.traces:
        for req in trace:
            sid = sid_of(req)
            for kv in extract_kv(req):
                if kv.key == "H:Host":
                    continue
                assert (sid, kv.key) in corpus.labels, kv.key


def test_save_and_load(tmp_path):
    corpus = generate(clean_app_spec(), users=2, requests_per_user=3, seed=7)
    corpus.save(tmp_path)
    assert (tmp_path / "user_00.jsonl").exists()
    assert (tmp_path / "user_01.jsonl").exists()
    labels = LabeledCorpus.load_labels(tmp_path / "labels.jsonl")
    assert labels == corpus.labels


# -- score arithmetic -----------------------------------------------------------


@pytest.mark.parametrize(
    "tp,fp,fn,precision,recall,f1",
    [
        (3184, 2021, 0, 0.611, 1.0, 0.759),
        (321, 99, 0, 0.764, 1.0, 0.866),
        (92, 24, 0, 0.793, 1.0, 0.885),
        (321, 184, 0, 0.636, 1.0, 0.778),
    ],
)
def test_published_metric_triples(tp, fp, fn, precision, recall, f1):
    s = metrics_from_counts(tp, fp, fn)
    assert s.precision == pytest.approx(precision, abs=1e-3)
    assert s.recall == pytest.approx(recall, abs=1e-3)
    assert s.f1 == pytest.approx(f1, abs=1e-3)


def test_score_all_correct_run():
    corpus = generate(clean_app_spec(), users=4, requests_per_user=10, seed=8)
    s = evaluate_corpus(corpus, ClassifierConfig())
    assert (s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0)


def test_score_counts_insufficient_on_pii_as_fn():
    sid = SID("p", "1", "GET", "h", "/")
    labels = {(sid, "U:id"): LIKELY_PII}
    from ppx.classify import Classification

    cls = Classification(
        sid=sid, key="U:id", value="x", verdict="InsufficientData",
        p_private=1.0, p_public=None,
    )
    s = score([cls], labels)
    assert (s.tp, s.fp, s.fn) == (0, 0, 1)
    assert s.recall == 0.0


def test_score_dedupes_tuples():
    sid = SID("p", "1", "GET", "h", "/")
    labels = {(sid, "U:id"): LIKELY_PII}
    from ppx.classify import Classification

    cls = Classification(
        sid=sid, key="U:id", value="x", verdict=LIKELY_PII, p_private=1.0, p_public=0.1
    )
    s = score([cls, cls, cls], labels)
    assert (s.tp, s.fp, s.fn) == (1, 0, 0)


# -- training rounds ----------------------------------------------------------------


def test_training_rounds_series_length():
    series = training_rounds(clean_app_spec(), rounds=1, seed=20, users=2, requests_per_user=4)
    assert len(series) == 1


def test_training_rounds_precision_non_decreasing_with_one_shot_noise():
    series = training_rounds(
        noisy_app_spec(), rounds=4, seed=21, users=4, requests_per_user=6
    )
    assert all(b >= a - 1e-12 for a, b in zip(series, series[1:]))


def test_training_rounds_round7_beats_round1():
    series = training_rounds(
        noisy_app_spec(), rounds=7, seed=22, users=4, requests_per_user=6
    )
    assert series[6] > series[0]
    assert series[0] < 1.0
    assert series[6] == 1.0


def test_sweep_direction_on_noisy_corpus():
    corpus = generate(noisy_app_spec(), users=4, requests_per_user=8, seed=23)
    rows = sweep_threshold(corpus, [1, 2, 4, 10, 16])
    precisions = [p for _, p, _ in rows]
    recalls = [r for _, _, r in rows]
    assert precisions[1] >= precisions[0]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_app_spec_json_round_trip(tmp_path):
    spec = noisy_app_spec()
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_obj()), encoding="utf-8")
    again = AppSpec.load(path)
    assert again.to_obj() == spec.to_obj()
