"""Tests for the document store and BM25 retrieval."""

import json
import math
from collections import Counter

import pytest

from fairsearch.errors import FeatureError, ParseError
from fairsearch.search_index import (
    ALL_FIELD,
    B,
    K1,
    SearchIndex,
    extract_features,
    tokenize,
)


def ndjson(*objs):
    return "\n".join(json.dumps(o) for o in objs) + "\n"


def build(*objs):
    index = SearchIndex()
    index.ingest(ndjson(*objs))
    return index


# -- oracle: recompute BM25 from the raw documents ---------------------------


def bm25_oracle(docs_by_id, query, field):
    """From-scratch scoring over token lists; same formula, fresh statistics."""
    token_lists = {}
    for doc_id, doc in docs_by_id.items():
        if field == ALL_FIELD:
            text = " ".join(doc["text"][k] for k in sorted(doc["text"]))
        else:
            text = doc["text"].get(field)
        if text is not None:
            token_lists[doc_id] = tokenize(text)
    n_docs = len(token_lists)
    avgdl = sum(len(t) for t in token_lists.values()) / n_docs
    scores = {}
    for term in dict.fromkeys(tokenize(query)):
        df = sum(1 for toks in token_lists.values() if term in toks)
        if df == 0:
            continue
        idf = math.log(1 + (n_docs - df + 0.5) / (df + 0.5))
        for doc_id, toks in token_lists.items():
            tf = Counter(toks)[term]
            if tf == 0:
                continue
            norm = tf + K1 * (1 - B + B * len(toks) / avgdl)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (K1 + 1) / norm
    return scores


# -- ingestion ----------------------------------------------------------------


def test_ingest_counts_documents():
    index = build(
        {"id": "d1", "text": "jon snow"},
        {"id": "d2", "text": "arya stark"},
        {"id": "d3", "text": "king landing"},
    )
    assert len(index) == 3


def test_ingest_empty_input():
    index = SearchIndex()
    assert index.ingest("") == 0
    assert index.ingest("\n\n") == 0


def test_ingest_missing_id_names_line():
    index = SearchIndex()
    payload = ndjson({"id": "d1", "text": "x"}, {"text": "no id here"})
    with pytest.raises(ParseError, match="line 2"):
        index.ingest(payload)


def test_ingest_duplicate_id_in_batch():
    index = SearchIndex()
    payload = ndjson({"id": "d1", "text": "x"}, {"id": "d1", "text": "y"})
    with pytest.raises(ParseError, match="duplicate"):
        index.ingest(payload)


def test_ingest_invalid_json_names_line():
    index = SearchIndex()
    with pytest.raises(ParseError, match="line 2"):
        index.ingest('{"id": "d1", "text": "x"}\n{oops\n')


def test_ingest_rejects_string_field_outside_attributes():
    index = SearchIndex()
    with pytest.raises(ParseError, match="gender"):
        index.ingest(ndjson({"id": "d1", "text": "x", "gender": "f"}))


def test_reingest_replaces_document():
    index = build({"id": "d1", "text": "jon snow"})
    index.ingest(ndjson({"id": "d1", "text": "arya stark"}))
    assert len(index) == 1
    assert [h.doc_id for h in index.bm25_search("arya", "body", 5)] == ["d1"]
    assert index.bm25_search("jon", "body", 5) == []


def test_ingest_numeric_and_attributes():
    index = build(
        {
            "id": "d1",
            "text": {"title": "jon"},
            "salary": 3.0,
            "attributes": {"gender": "f"},
        }
    )
    doc = index.document("d1")
    assert doc.numeric_fields == {"salary": 3.0}
    assert doc.attributes == {"gender": "f"}


# -- bm25 ----------------------------------------------------------------------


def test_bm25_term_containment():
    index = build({"id": "d1", "text": "jon snow"}, {"id": "d2", "text": "arya stark"})
    hits = index.bm25_search("jon", "body", 10)
    assert [h.doc_id for h in hits] == ["d1"]
    assert hits[0].baseline_score > 0


def test_bm25_single_doc_formula():
    index = build({"id": "d1", "text": "jon jon"})
    hits = index.bm25_search("jon", "body", 1)
    # tf=2, dl=avgdl=2, df=1, N=1
    expected = math.log(1 + 0.5 / 1.5) * (2 * (K1 + 1)) / (2 + K1)
    assert hits[0].baseline_score == pytest.approx(expected, abs=1e-3)
    assert expected == pytest.approx(0.3956, abs=1e-3)


def test_bm25_absent_term_returns_empty():
    index = build({"id": "d1", "text": "jon snow"})
    assert index.bm25_search("daenerys", "body", 5) == []


def test_bm25_empty_query_is_error():
    index = build({"id": "d1", "text": "jon snow"})
    with pytest.raises(ValueError):
        index.bm25_search("   !!", "body", 5)


def test_bm25_unknown_field_is_error():
    index = build({"id": "d1", "text": "jon snow"})
    with pytest.raises(ValueError):
        index.bm25_search("jon", "nope", 5)


def test_bm25_sorted_desc_with_id_ties():
    index = build(
        {"id": "b", "text": "jon snow"},
        {"id": "a", "text": "jon snow"},
        {"id": "c", "text": "jon jon snow"},
    )
    hits = index.bm25_search("jon", "body", 10)
    scores = [h.baseline_score for h in hits]
    assert scores == sorted(scores, reverse=True)
    # identical docs tie; id breaks the tie
    tied = [h.doc_id for h in hits if h.baseline_score == hits[-1].baseline_score]
    assert tied == sorted(tied)


def test_bm25_all_field_spans_text_fields():
    index = build(
        {"id": "d1", "text": {"title": "jon", "body": "winter"}},
        {"id": "d2", "text": {"title": "arya", "body": "snow"}},
    )
    assert [h.doc_id for h in index.bm25_search("jon", ALL_FIELD, 5)] == ["d1"]
    assert [h.doc_id for h in index.bm25_search("snow", ALL_FIELD, 5)] == ["d2"]


def test_bm25_matches_from_scratch_oracle_after_updates():
    docs = [
        {"id": "d1", "text": {"body": "the winter is coming"}},
        {"id": "d2", "text": {"body": "jon snow knows nothing at all"}},
        {"id": "d3", "text": {"body": "winter winter snow"}},
        {"id": "d4", "text": {"body": "a song of ice and fire"}},
    ]
    index = build(*docs)
    # replace one doc and add another, then compare against fresh statistics
    index.ingest(ndjson({"id": "d2", "text": {"body": "snow and ice"}}))
    index.ingest(ndjson({"id": "d5", "text": {"body": "winter snow ice jon"}}))
    current = {
        "d1": docs[0],
        "d2": {"id": "d2", "text": {"body": "snow and ice"}},
        "d3": docs[2],
        "d4": docs[3],
        "d5": {"id": "d5", "text": {"body": "winter snow ice jon"}},
    }
    for query in ("winter snow", "jon", "ice fire"):
        expected = bm25_oracle(current, query, "body")
        hits = index.bm25_search(query, "body", 10)
        assert {h.doc_id for h in hits} == set(expected)
        for h in hits:
            assert h.baseline_score == pytest.approx(expected[h.doc_id], rel=1e-12)


def test_ingest_then_search_round_trip():
    index = build({"id": "x9", "text": "unique handle zorblatt"})
    assert [h.doc_id for h in index.bm25_search("zorblatt", "body", 1)] == ["x9"]


def test_searches_see_consistent_snapshots_during_ingest():
    import threading

    index = build({"id": "seed", "text": "winter snow"})
    stop = threading.Event()
    errors = []

    def reader():
        while not stop.is_set():
            try:
                hits = index.bm25_search("winter snow", "body", 100)
                # every observed snapshot is internally consistent
                scores = [h.baseline_score for h in hits]
                assert scores == sorted(scores, reverse=True)
            except AssertionError as exc:  # pragma: no cover - failure path
                errors.append(exc)
                return

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(50):
        index.ingest(ndjson({"id": f"d{i}", "text": f"winter snow batch {i}"}))
    stop.set()
    for t in threads:
        t.join()
    assert not errors
    assert len(index) == 51


# -- snapshots -------------------------------------------------------------------


def test_snapshot_round_trip(tmp_path):
    index = build(
        {"id": "d1", "text": {"body": "jon"}, "salary": 2.5,
         "attributes": {"gender": "m"}},
        {"id": "d2", "text": {"body": "arya"}},
    )
    path = tmp_path / "snap.ndjson"
    index.save_snapshot(path)
    restored = SearchIndex()
    assert restored.load_snapshot(path) == 2
    assert restored.document("d1").numeric_fields == {"salary": 2.5}
    assert restored.document("d1").attributes == {"gender": "m"}
    assert [h.doc_id for h in restored.bm25_search("arya", "body", 5)] == ["d2"]


# -- feature extraction ------------------------------------------------------------


def test_extract_features_baseline_score_only():
    index = build({"id": "d1", "text": "jon snow"})
    hit = index.bm25_search("jon", "body", 1)[0]
    fv = extract_features(hit, ["baseline_score"])
    assert fv.features == (hit.baseline_score,)
    assert fv.protected == 0.0
    assert fv.doc_id == "d1"


def test_extract_features_numeric_field_and_protected():
    index = build({"id": "d1", "text": "jon snow", "salary": 3.0})
    hit = index.bm25_search("jon", "body", 1)[0]
    fv = extract_features(hit, ["baseline_score", "salary"], protected=True)
    assert fv.features == (hit.baseline_score, 3.0)
    assert fv.protected == 1.0


def test_extract_features_missing_field_names_doc():
    index = build({"id": "d1", "text": "jon snow"})
    hit = index.bm25_search("jon", "body", 1)[0]
    with pytest.raises(FeatureError, match="salary.*d1"):
        extract_features(hit, ["salary"])
