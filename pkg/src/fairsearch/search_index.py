"""In-memory document store with BM25 retrieval and feature extraction.

Documents are ingested as newline-delimited JSON records.  Text fields are
tokenized by lowercasing and splitting on non-alphanumeric characters; a
synthetic ``_all`` field concatenating every text field is indexed too, so
queries can match across fields.

Ingestion swaps in a fresh immutable state object, so readers always see a
consistent snapshot and never block.
"""

from __future__ import annotations

import json
import math
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .deltr import FeatureVector
from .errors import FeatureError, ParseError

K1 = 1.2
B = 0.75
ALL_FIELD = "_all"

_TOKEN = re.compile(r"[a-z0-9]+")

_RESERVED_KEYS = {"id", "text", "attributes"}


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    text_fields: dict[str, str] = field(default_factory=dict)
    numeric_fields: dict[str, float] = field(default_factory=dict)
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ScoredHit:
    doc_id: str
    baseline_score: float
    document: Document


@dataclass(frozen=True)
class _IndexState:
    docs: dict[str, Document]
    # field -> term -> doc_id -> term frequency
    postings: dict[str, dict[str, dict[str, int]]]
    # field -> doc_id -> token count
    doc_lens: dict[str, dict[str, int]]


_EMPTY = _IndexState({}, {}, {})


def _document_from_record(obj, line_no: int) -> Document:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line=line_no)
    doc_id = obj.get("id")
    if not isinstance(doc_id, str) or not doc_id:
        raise ParseError("record must carry a non-empty string 'id'", line=line_no)
    text = obj.get("text", {})
    if isinstance(text, str):
        text = {"body": text}
    if not isinstance(text, dict) or not all(
        isinstance(k, str) and k and isinstance(v, str) for k, v in text.items()
    ):
        raise ParseError(
            "'text' must be a string or an object of field -> string", line=line_no
        )
    attributes = obj.get("attributes", {})
    if not isinstance(attributes, dict) or not all(
        isinstance(k, str) and k and isinstance(v, str)
        for k, v in attributes.items()
    ):
        raise ParseError("'attributes' must map field names to strings", line=line_no)
    numeric = {}
    for key, value in obj.items():
        if key in _RESERVED_KEYS:
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(
                f"field {key!r} must be numeric (or live under 'attributes')",
                line=line_no,
            )
        if not math.isfinite(float(value)):
            raise ParseError(f"field {key!r} is not finite", line=line_no)
        numeric[key] = float(value)
    return Document(doc_id, dict(text), numeric, dict(attributes))


def parse_document_lines(records) -> list[Document]:
    """Parse NDJSON input (a string, bytes, or an iterable of lines)."""
    if isinstance(records, bytes):
        records = records.decode("utf-8")
    if isinstance(records, str):
        lines = records.splitlines()
    else:
        lines = [line.rstrip("\n") for line in records]
    docs = []
    seen = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line=line_no) from None
        doc = _document_from_record(obj, line_no)
        if doc.id in seen:
            raise ParseError(f"duplicate id {doc.id!r} in batch", line=line_no)
        seen.add(doc.id)
        docs.append(doc)
    return docs


class SearchIndex:
    """Thread-safe index: many concurrent readers, one writer at a time."""

    def __init__(self):
        self._state = _EMPTY
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._state.docs)

    def document(self, doc_id: str) -> Document | None:
        return self._state.docs.get(doc_id)

    def fields(self) -> set[str]:
        return set(self._state.doc_lens)

    def ingest(self, records) -> int:
        """Index a batch of NDJSON records; re-ingesting an id replaces it."""
        batch = parse_document_lines(records)
        if not batch:
            return 0
        with self._write_lock:
            state = self._state
            docs = dict(state.docs)
            postings = {
                f: {t: dict(tfs) for t, tfs in terms.items()}
                for f, terms in state.postings.items()
            }
            doc_lens = {f: dict(lens) for f, lens in state.doc_lens.items()}
            for doc in batch:
                if doc.id in docs:
                    self._remove(docs[doc.id], postings, doc_lens)
                docs[doc.id] = doc
                self._add(doc, postings, doc_lens)
            self._state = _IndexState(docs, postings, doc_lens)
        return len(batch)

    @staticmethod
    def _field_tokens(doc: Document) -> dict[str, list[str]]:
        per_field = {name: tokenize(text) for name, text in doc.text_fields.items()}
        if per_field:
            per_field[ALL_FIELD] = [
                tok
                for name in sorted(doc.text_fields)
                for tok in per_field[name]
            ]
        return per_field

    def _add(self, doc: Document, postings, doc_lens) -> None:
        for fname, tokens in self._field_tokens(doc).items():
            lens = doc_lens.setdefault(fname, {})
            lens[doc.id] = len(tokens)
            terms = postings.setdefault(fname, {})
            for tok in tokens:
                terms.setdefault(tok, {})
                terms[tok][doc.id] = terms[tok].get(doc.id, 0) + 1

    def _remove(self, doc: Document, postings, doc_lens) -> None:
        for fname, tokens in self._field_tokens(doc).items():
            doc_lens[fname].pop(doc.id, None)
            if not doc_lens[fname]:
                del doc_lens[fname]
            terms = postings.get(fname, {})
            for tok in set(tokens):
                tfs = terms.get(tok)
                if tfs is not None:
                    tfs.pop(doc.id, None)
                    if not tfs:
                        del terms[tok]
            if fname in postings and not postings[fname]:
                del postings[fname]

    def bm25_search(self, query_text: str, field_name: str, n: int) -> list[ScoredHit]:
        """Top-n documents of ``field_name`` by BM25, ties broken by id.

        idf = ln(1 + (N - df + 0.5) / (df + 0.5)) with N the number of
        documents carrying the field; k1 = 1.2, b = 0.75.  Only documents
        containing at least one query term are returned.
        """
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        state = self._state
        terms = tokenize(query_text)
        if not terms:
            raise ValueError("query is empty after tokenization")
        lens = state.doc_lens.get(field_name)
        if lens is None:
            raise ValueError(f"field {field_name!r} is not indexed")
        field_postings = state.postings.get(field_name, {})
        total = len(lens)
        avgdl = sum(lens.values()) / total
        scores: dict[str, float] = {}
        for term in dict.fromkeys(terms):
            tfs = field_postings.get(term)
            if not tfs:
                continue
            df = len(tfs)
            idf = math.log(1.0 + (total - df + 0.5) / (df + 0.5))
            for doc_id, tf in tfs.items():
                norm = tf + K1 * (1.0 - B + B * lens[doc_id] / avgdl)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (K1 + 1.0) / norm
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:n]
        return [
            ScoredHit(doc_id, score, state.docs[doc_id]) for doc_id, score in ranked
        ]

    def save_snapshot(self, path) -> None:
        """Write all documents as NDJSON in the ingestion format."""
        state = self._state
        with Path(path).open("w") as fh:
            for doc_id in sorted(state.docs):
                doc = state.docs[doc_id]
                record: dict = {"id": doc.id}
                if doc.text_fields:
                    record["text"] = doc.text_fields
                record.update(doc.numeric_fields)
                if doc.attributes:
                    record["attributes"] = doc.attributes
                fh.write(json.dumps(record) + "\n")

    def load_snapshot(self, path) -> int:
        return self.ingest(Path(path).read_text())


def extract_features(
    hit: ScoredHit, feature_names, protected: bool = False
) -> FeatureVector:
    """Build a model input from a hit: named values plus the protected flag.

    Every name must be ``baseline_score`` or a numeric field present on the
    document.  The protected indicator is supplied by the caller (resolved
    from attribute matching), never read from the feature list.
    """
    values = []
    for name in feature_names:
        if name == "baseline_score":
            values.append(hit.baseline_score)
        elif name in hit.document.numeric_fields:
            values.append(hit.document.numeric_fields[name])
        else:
            raise FeatureError(
                f"feature {name!r} is missing on document {hit.doc_id!r}"
            )
    return FeatureVector(hit.doc_id, 1.0 if protected else 0.0, tuple(values))
