"""Rescoring service: model upload, MTable endpoints, search with rescorers.

Endpoints:
  POST /{index}/_ingest     newline-delimited document records
  POST /{index}/_search     match query, optional deltr or fair rescorer
  POST /_fairsearch/model   store a model record by name
  PUT  /_fairsearch/mtable  create and persist a table for (k, p, alpha)
  GET  /_fairsearch/mtable  fetch a stored table by k=&p=&alpha=

Search first runs the BM25 baseline, then lets the rescorer permute the
top ``window_size`` hits; everything below the window keeps its baseline
order.  Request bodies are parsed leniently (trailing commas before a
closing brace or bracket are tolerated).
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .deltr import predict
from .errors import FeatureError, ParseError
from .fair_rerank import (
    Candidate,
    FairnessParams,
    MTable,
    construct_mtable,
    fair_rerank,
    mtable_from_record,
    mtable_key,
    mtable_to_record,
)
from .ltr_data import model_from_dict
from .search_index import SearchIndex, extract_features
from .storage import KeyValueLog

MODEL_TYPE = "DELTR"
DEFAULT_SIZE = 10


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def parse_json_lenient(text: str):
    """JSON parse that tolerates trailing commas, as in hand-written bodies."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        try:
            return json.loads(_TRAILING_COMMA.sub(r"\1", text))
        except json.JSONDecodeError as exc:
            raise ApiError(400, f"request body is not valid JSON: {exc.msg}")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ApiError(400, f"{where} is missing {key!r}")
    return obj[key]


@dataclass(frozen=True)
class _Hit:
    doc_id: str
    score: float


class RescoreEngine:
    """Core request handling, independent of HTTP plumbing."""

    def __init__(self, storage_dir=None):
        models_path = mtables_path = None
        if storage_dir is not None:
            storage_dir = Path(storage_dir)
            models_path = storage_dir / "models.jsonl"
            mtables_path = storage_dir / "mtables.jsonl"
        self._model_log = KeyValueLog(models_path)
        self._mtable_log = KeyValueLog(mtables_path)
        self._indices: dict[str, SearchIndex] = {}
        self._index_lock = threading.Lock()
        # parsed models, swapped atomically on upload
        self._models: dict[str, tuple[dict, object]] = {}
        for name in self._model_log.keys():
            record = self._model_log.get(name)
            self._models[name] = (record, model_from_dict(record["model"]))

    # -- indices ---------------------------------------------------------

    def index(self, name: str, create: bool = False) -> SearchIndex:
        with self._index_lock:
            idx = self._indices.get(name)
            if idx is None:
                if not create:
                    raise ApiError(404, f"index {name!r} does not exist")
                idx = self._indices[name] = SearchIndex()
            return idx

    def ingest(self, index_name: str, payload) -> int:
        try:
            return self.index(index_name, create=True).ingest(payload)
        except ParseError as exc:
            raise ApiError(400, str(exc))

    # -- models ----------------------------------------------------------

    def upload_model(self, record) -> dict:
        if not isinstance(record, dict):
            raise ApiError(400, "model record must be a JSON object")
        name = _require(record, "model_name", "model record")
        if not isinstance(name, str) or not name:
            raise ApiError(400, "model_name must be a non-empty string")
        if _require(record, "type", "model record") != MODEL_TYPE:
            raise ApiError(400, f"type must be {MODEL_TYPE!r}")
        try:
            model = model_from_dict(_require(record, "model", "model record"))
        except ParseError as exc:
            raise ApiError(400, str(exc))
        feature_set = _require(record, "feature_set", "model record")
        if (
            not isinstance(feature_set, list)
            or not all(isinstance(f, str) for f in feature_set)
        ):
            raise ApiError(400, "feature_set must be a list of names")
        if len(feature_set) != model.weights.size:
            raise ApiError(
                400,
                f"feature_set has {len(feature_set)} names but the model has "
                f"{model.weights.size} weights",
            )
        stored = {
            "model_name": name,
            "type": MODEL_TYPE,
            "model": record["model"],
            "feature_set": feature_set,
        }
        self._model_log.put(name, stored)
        self._models[name] = (stored, model)
        return {"acknowledged": True, "model_name": name}

    def get_model(self, name: str):
        entry = self._models.get(name)
        if entry is None:
            raise ApiError(404, f"model {name!r} is not stored")
        return entry

    # -- mtables ---------------------------------------------------------

    def create_mtable(self, k, p, alpha, adjust: bool = False) -> dict:
        try:
            params = FairnessParams(int(k), float(p), float(alpha))
            mtable = construct_mtable(params, adjust=bool(adjust))
        except (TypeError, ValueError) as exc:
            raise ApiError(400, str(exc))
        record = mtable_to_record(mtable)
        self._mtable_log.put(mtable_key(params.k, params.p, params.alpha), record)
        return record

    def get_mtable(self, k, p, alpha):
        try:
            key = mtable_key(int(k), float(p), float(alpha))
        except (TypeError, ValueError) as exc:
            raise ApiError(400, str(exc))
        return self._mtable_log.get(key)

    def _mtable_for_search(self, k: int, p: float, alpha: float) -> MTable:
        record = self.get_mtable(k, p, alpha)
        if record is None:
            record = self.create_mtable(k, p, alpha, adjust=False)
        return mtable_from_record(record)

    # -- search ----------------------------------------------------------

    def search(self, index_name: str, request) -> dict:
        if not isinstance(request, dict):
            raise ApiError(400, "request body must be a JSON object")
        idx = self.index(index_name)
        field_name, terms = self._parse_match(request)
        start = request.get("from", 0)
        size = request.get("size", DEFAULT_SIZE)
        if not isinstance(start, int) or start < 0:
            raise ApiError(400, "'from' must be a non-negative integer")
        if not isinstance(size, int) or size < 0:
            raise ApiError(400, "'size' must be a non-negative integer")

        if len(idx) == 0:
            baseline = []
        else:
            try:
                baseline = idx.bm25_search(terms, field_name, n=len(idx))
            except ValueError as exc:
                raise ApiError(400, str(exc))

        rescore = request.get("rescore")
        meta = None
        if rescore is None:
            final = [_Hit(h.doc_id, h.baseline_score) for h in baseline]
        else:
            final, meta = self._rescore(rescore, baseline)

        page = final[start : start + size]
        response = {
            "hits": {
                "total": len(final),
                "hits": [{"_id": h.doc_id, "_score": h.score} for h in page],
            }
        }
        if meta is not None:
            response["fairsearch"] = meta
        return response

    @staticmethod
    def _parse_match(request: dict) -> tuple[str, str]:
        query = _require(request, "query", "search request")
        if not isinstance(query, dict) or "match" not in query:
            raise ApiError(400, "only 'match' queries are supported")
        match = query["match"]
        if not isinstance(match, dict) or len(match) != 1:
            raise ApiError(400, "'match' must name exactly one field")
        (field_name, terms), = match.items()
        if not isinstance(terms, str):
            raise ApiError(400, "match terms must be a string")
        return field_name, terms

    def _rescore(self, rescore, baseline) -> tuple[list[_Hit], dict]:
        if not isinstance(rescore, dict):
            raise ApiError(400, "'rescore' must be an object")
        window = rescore.get("window_size", DEFAULT_SIZE)
        if not isinstance(window, int) or isinstance(window, bool) or window < 1:
            raise ApiError(400, "window_size must be a positive integer")
        has_deltr = "query" in rescore
        has_fair = "fair_rescorer" in rescore
        if has_deltr and has_fair:
            raise ApiError(400, "at most one rescorer is allowed")
        if not has_deltr and not has_fair:
            raise ApiError(400, "rescore carries no rescorer object")
        if has_deltr:
            return self._rescore_deltr(rescore["query"], baseline, window)
        return self._rescore_fair(rescore["fair_rescorer"], baseline, window)

    def _protected_flag(self, hit, protected_key: str, protected_value) -> bool:
        attrs = hit.document.attributes
        if protected_key not in attrs:
            raise ApiError(
                400,
                f"document {hit.doc_id!r} has no attribute {protected_key!r}",
            )
        return attrs[protected_key] == protected_value

    def _rescore_deltr(self, rescorer, baseline, window) -> tuple[list[_Hit], dict]:
        if not isinstance(rescorer, dict):
            raise ApiError(400, "rescore query must be an object")
        sltr = _require(
            _require(rescorer, "rescore_query", "rescore query"),
            "sltr",
            "rescore_query",
        )
        if not isinstance(sltr, dict):
            raise ApiError(400, "'sltr' must be an object")
        name = _require(sltr, "model", "sltr")
        params = sltr.get("params", {})
        if not isinstance(params, dict):
            raise ApiError(400, "sltr params must be an object")
        record, model = self.get_model(name)
        protected_key = params.get("protected_key")
        protected_value = params.get("protected_value")

        window_hits = baseline[:window]
        vectors = []
        for hit in window_hits:
            flag = (
                self._protected_flag(hit, protected_key, protected_value)
                if protected_key is not None
                else False
            )
            try:
                vectors.append(
                    extract_features(hit, record["feature_set"][1:], protected=flag)
                )
            except FeatureError as exc:
                raise ApiError(400, str(exc))
        if vectors:
            scores, ranking = predict(model, vectors)
            score_by_id = {
                v.doc_id: float(s) for v, s in zip(vectors, scores)
            }
            reordered = [_Hit(doc_id, score_by_id[doc_id]) for doc_id in ranking]
        else:
            reordered = []
        final = reordered + [
            _Hit(h.doc_id, h.baseline_score) for h in baseline[window:]
        ]
        meta = {
            "rescorer": "deltr",
            "model": name,
            "window_size": window,
            "rescored": len(reordered),
        }
        return final, meta

    def _rescore_fair(self, rescorer, baseline, window) -> tuple[list[_Hit], dict]:
        if not isinstance(rescorer, dict):
            raise ApiError(400, "fair_rescorer must be an object")
        protected_key = _require(rescorer, "protected_key", "fair_rescorer")
        protected_value = _require(rescorer, "protected_value", "fair_rescorer")
        alpha = _require(rescorer, "significance_level", "fair_rescorer")
        p = _require(rescorer, "min_proportion_protected", "fair_rescorer")
        if not isinstance(protected_key, str) or not protected_key:
            raise ApiError(400, "protected_key must be a non-empty string")

        k = min(window, len(baseline))
        window_hits = baseline[:window]
        if k == 0:
            return [], {
                "rescorer": "fair",
                "satisfied": True,
                "violations": [],
            }
        try:
            mtable = self._mtable_for_search(k, float(p), float(alpha))
        except (TypeError, ValueError) as exc:
            raise ApiError(400, str(exc))
        candidates = [
            Candidate(
                h.doc_id,
                h.baseline_score,
                self._protected_flag(h, protected_key, protected_value),
            )
            for h in window_hits
        ]
        result = fair_rerank(candidates, mtable)
        score_by_id = {h.doc_id: h.baseline_score for h in window_hits}
        final = [_Hit(c.id, score_by_id[c.id]) for c in result.ranking] + [
            _Hit(h.doc_id, h.baseline_score) for h in baseline[window:]
        ]
        meta = {
            "rescorer": "fair",
            "k": mtable.params.k,
            "p": mtable.params.p,
            "alpha": mtable.params.alpha,
            "alpha_c": mtable.alpha_c,
            "mtable": list(mtable.entries),
            "satisfied": result.satisfied,
            "violations": list(result.violations),
        }
        return final, meta


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def engine(self) -> RescoreEngine:
        return self.server.engine  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        if not self.server.quiet:  # type: ignore[attr-defined]
            super().log_message(fmt, *args)

    def _body(self) -> str:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length).decode("utf-8") if length else ""

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        parts = [p for p in parsed.path.split("/") if p]
        try:
            if method == "GET" and parts == ["_fairsearch", "mtable"]:
                self._handle_get_mtable(parse_qs(parsed.query))
            elif method == "PUT" and parts == ["_fairsearch", "mtable"]:
                body = parse_json_lenient(self._body())
                if not isinstance(body, dict):
                    raise ApiError(400, "body must be a JSON object")
                record = self.engine.create_mtable(
                    _require(body, "k", "mtable request"),
                    _require(body, "p", "mtable request"),
                    _require(body, "alpha", "mtable request"),
                    adjust=bool(body.get("adjust", False)),
                )
                self._send(200, record)
            elif method == "POST" and parts == ["_fairsearch", "model"]:
                ack = self.engine.upload_model(parse_json_lenient(self._body()))
                self._send(200, ack)
            elif method == "POST" and len(parts) == 2 and parts[1] == "_search":
                response = self.engine.search(
                    parts[0], parse_json_lenient(self._body())
                )
                self._send(200, response)
            elif method == "POST" and len(parts) == 2 and parts[1] == "_ingest":
                count = self.engine.ingest(parts[0], self._body())
                self._send(200, {"indexed": count})
            else:
                raise ApiError(404, f"no route for {method} {parsed.path}")
        except ApiError as exc:
            self._send(exc.status, {"error": exc.message})
        except Exception as exc:  # noqa: BLE001 - keep the server alive
            self._send(500, {"error": f"internal error: {exc}"})

    def _handle_get_mtable(self, query: dict) -> None:
        try:
            k = query["k"][0]
            p = query["p"][0]
            alpha = query["alpha"][0]
        except KeyError as exc:
            raise ApiError(400, f"missing query parameter {exc.args[0]!r}")
        record = self.engine.get_mtable(k, p, alpha)
        if record is None:
            raise ApiError(404, f"no mtable stored for k={k}, p={p}, alpha={alpha}")
        self._send(200, record)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")


class FairSearchServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, host: str, port: int, engine: RescoreEngine, quiet=True):
        super().__init__((host, port), _Handler)
        self.engine = engine
        self.quiet = quiet


@dataclass(frozen=True)
class ServeConfig:
    host: str
    port: int
    storage_dir: Path | None = None
    snapshots: dict[str, str] | None = None


def load_serve_config(path) -> ServeConfig:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    address = doc.get("address", "127.0.0.1:8090")
    host, _, port_text = address.rpartition(":")
    if not host or not port_text.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    port = int(port_text)
    if not 0 < port < 65536:
        raise ValueError(f"port must be in 1..65535, got {port}")
    storage_dir = doc.get("storage_dir")
    snapshots = doc.get("snapshots", {})
    if not isinstance(snapshots, dict):
        raise ValueError("'snapshots' must map index names to file paths")
    return ServeConfig(
        host=host,
        port=port,
        storage_dir=Path(storage_dir) if storage_dir else None,
        snapshots={str(k): str(v) for k, v in snapshots.items()},
    )


def create_server(config: ServeConfig, quiet: bool = True) -> FairSearchServer:
    engine = RescoreEngine(storage_dir=config.storage_dir)
    for index_name, snapshot in (config.snapshots or {}).items():
        engine.index(index_name, create=True).load_snapshot(snapshot)
    return FairSearchServer(config.host, config.port, engine, quiet=quiet)
