"""File formats for training data and trained models.

Training data is CSV with header ``query_id,doc_id,protected,<feature
names...>,judgment`` and rows grouped by query_id; a query_id showing up
again after a different one is a parse error.  Models are single JSON
documents with a format-version field.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .deltr import DeltrModel, FeatureVector, QueryDocs
from .errors import ParseError

MODEL_FORMAT_VERSION = 1

_FIXED_LEAD = ("query_id", "doc_id", "protected")
_JUDGMENT = "judgment"


def read_training_csv(path) -> tuple[list[QueryDocs], list[str]]:
    """Parse a training file into queries plus the feature names.

    The returned names are the columns between ``protected`` and
    ``judgment``; the protected indicator itself is carried on each
    FeatureVector, not in the name list.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        header = [h.strip() for h in header]
        if (
            len(header) < 5
            or tuple(header[:3]) != _FIXED_LEAD
            or header[-1] != _JUDGMENT
        ):
            raise ParseError(
                "header must be query_id,doc_id,protected,<features...>,judgment",
                line=1,
            )
        feature_names = header[3:-1]
        n_cols = len(header)

        groups: dict[str, tuple[list[FeatureVector], list[float]]] = {}
        finished: set[str] = set()
        current: str | None = None
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise ParseError(
                    f"expected {n_cols} columns, got {len(row)}", line=line_no
                )
            qid = row[0]
            if qid != current:
                if qid in finished:
                    raise ParseError(
                        f"query_id {qid!r} is not contiguous", line=line_no
                    )
                if current is not None:
                    finished.add(current)
                current = qid
                groups[qid] = ([], [])
            protected = row[2].strip()
            if protected not in ("0", "1", "0.0", "1.0"):
                raise ParseError(
                    f"protected must be 0 or 1, got {protected!r}", line=line_no
                )
            try:
                features = tuple(float(v) for v in row[3:-1])
                judgment = float(row[-1])
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
            docs, judgments = groups[qid]
            docs.append(FeatureVector(row[1], float(protected), features))
            judgments.append(judgment)

    if not groups:
        raise ParseError("no data rows")
    queries = []
    for qid, (docs, judgments) in groups.items():
        try:
            queries.append(QueryDocs(qid, tuple(docs), tuple(judgments)))
        except ValueError as exc:
            raise ParseError(str(exc)) from None
    return queries, feature_names


def write_training_csv(queries, feature_names, path) -> None:
    feature_names = list(feature_names)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*_FIXED_LEAD, *feature_names, _JUDGMENT])
        for q in queries:
            for doc, judgment in zip(q.docs, q.judgments):
                if len(doc.features) != len(feature_names):
                    raise ValueError(
                        f"document {doc.doc_id!r} has {len(doc.features)} "
                        f"features, header names {len(feature_names)}"
                    )
                writer.writerow(
                    [
                        q.query_id,
                        doc.doc_id,
                        int(doc.protected),
                        *(repr(v) for v in doc.features),
                        repr(float(judgment)),
                    ]
                )


def model_to_dict(model: DeltrModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "feature_names": list(model.feature_names),
        "weights": [float(w) for w in model.weights],
        "gamma": model.gamma,
        "standardization": [[m, s] for m, s in model.standardization],
    }


def model_from_dict(doc: dict) -> DeltrModel:
    if not isinstance(doc, dict):
        raise ParseError("model document must be an object")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ParseError(f"unsupported model format_version {version!r}")
    try:
        return DeltrModel(
            weights=[float(w) for w in doc["weights"]],
            feature_names=tuple(doc["feature_names"]),
            gamma=float(doc["gamma"]),
            standardization=tuple(
                (float(m), float(s)) for m, s in doc["standardization"]
            ),
        )
    except KeyError as exc:
        raise ParseError(f"model document missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid model document: {exc}") from None


def save_model(model: DeltrModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path) -> DeltrModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file is not valid JSON: {exc}") from None
    return model_from_dict(doc)
