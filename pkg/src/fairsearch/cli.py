"""Command line entry point.

Exit codes: 0 success, 1 domain or validation error, 2 I/O or parse error.
Diagnostics go to stderr; machine-readable output goes to stdout or to the
file named by --out, so commands compose in pipelines.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
import urllib.error
import urllib.request
from contextlib import nullcontext
from pathlib import Path

import click

from . import deltr, ltr_data, service
from .errors import ParseError, TrainingDivergedError
from .fair_rerank import (
    Candidate,
    FairnessParams,
    construct_mtable,
    fair_rerank,
    mtable_from_record,
    mtable_to_record,
)
from .search_index import SearchIndex

DEFAULT_SEED = 42


def _guarded(fn):
    """Map exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ParseError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except TrainingDivergedError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _open_out(out):
    return Path(out).open("w") if out else nullcontext(sys.stdout)


@click.group()
def main():
    """Fair ranking toolkit: train fairness-aware rankers, build minimum
    protected-count tables, re-rank result lists and run the rescoring
    service."""


# -- mtable ----------------------------------------------------------------


@main.command("mtable")
@click.option("-k", "k", type=int, required=True, help="Ranking length.")
@click.option("-p", "p", type=float, required=True, help="Minimum protected proportion.")
@click.option("--alpha", type=float, required=True, help="Significance level.")
@click.option("--adjust/--no-adjust", default=False,
              help="Tighten the per-position level for the joint test.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def cmd_mtable(k, p, alpha, adjust, out):
    """Print the minimum protected-count table as a JSON document."""
    params = FairnessParams(k, p, alpha)
    mtable = construct_mtable(params, adjust=adjust)
    doc = json.dumps(mtable_to_record(mtable))
    with _open_out(out) as fh:
        fh.write(doc + "\n")


# -- rerank ------------------------------------------------------------------


def _read_candidates(path):
    candidates = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "score", "protected"]:
            raise ParseError("candidates header must be id,score,protected", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ParseError("expected 3 columns", line=line_no)
            flag = row[2].strip().lower()
            if flag in ("1", "true"):
                protected = True
            elif flag in ("0", "false"):
                protected = False
            else:
                raise ParseError(f"protected must be 0/1/true/false, got {row[2]!r}",
                                 line=line_no)
            try:
                candidates.append(Candidate(row[0], float(row[1]), protected))
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
    return candidates


@main.command("rerank")
@click.option("--candidates", "candidates_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns id,score,protected.")
@click.option("--mtable-file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Table document produced by 'mtable'.")
@click.option("-k", "k", type=int, default=None)
@click.option("-p", "p", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--adjust/--no-adjust", default=False)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def cmd_rerank(candidates_path, mtable_file, k, p, alpha, adjust, out):
    """Re-rank a candidate file under the fairness constraint.

    The re-ranked list is written as CSV; the satisfied flag and any
    violation positions are reported on stderr.
    """
    if mtable_file:
        try:
            record = json.loads(Path(mtable_file).read_text())
            mtable = mtable_from_record(record)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad mtable file: {exc}") from None
    else:
        if k is None or p is None or alpha is None:
            raise ValueError("either --mtable-file or all of -k, -p, --alpha")
        mtable = construct_mtable(FairnessParams(k, p, alpha), adjust=adjust)
    candidates = _read_candidates(candidates_path)
    result = fair_rerank(candidates, mtable)
    with _open_out(out) as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "score", "protected"])
        for c in result.ranking:
            writer.writerow([c.id, repr(c.score), int(c.protected)])
    click.echo(
        f"satisfied={str(result.satisfied).lower()} "
        f"violations={list(result.violations)}",
        err=True,
    )


# -- train / predict ---------------------------------------------------------


@main.command("train")
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--gamma", type=float, default=0.0, show_default=True)
@click.option("--learning-rate", type=float, default=0.1, show_default=True)
@click.option("--iterations", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--init-scale", type=float, default=0.01, show_default=True)
@click.option("--out", "model_path", required=True,
              type=click.Path(dir_okay=False), help="Model file to write.")
@_guarded
def cmd_train(data_path, gamma, learning_rate, iterations, seed, init_scale,
              model_path):
    """Train a model; the loss trajectory is printed as CSV."""
    queries, feature_names = ltr_data.read_training_csv(data_path)
    config = deltr.TrainConfig(
        gamma=gamma,
        learning_rate=learning_rate,
        iterations=iterations,
        seed=seed,
        init_scale=init_scale,
    )
    result = deltr.fit(queries, config, ["protected", *feature_names])
    ltr_data.save_model(result.model, model_path)
    writer = csv.writer(sys.stdout)
    writer.writerow(["iteration", "relevance_part", "fairness_part", "total"])
    for i, (relevance, fairness, total) in enumerate(result.trajectory):
        writer.writerow([i, repr(relevance), repr(fairness), repr(total)])


@main.command("predict")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def cmd_predict(model_path, data_path, out):
    """Score a training-format file; one ranked CSV row per document."""
    model = ltr_data.load_model(model_path)
    queries, _ = ltr_data.read_training_csv(data_path)
    with _open_out(out) as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "doc_id", "score"])
        for q in queries:
            scores, ranking = deltr.predict(model, q.docs)
            by_id = {d.doc_id: float(s) for d, s in zip(q.docs, scores)}
            for doc_id in ranking:
                writer.writerow([q.query_id, doc_id, repr(by_id[doc_id])])


# -- synthetic data / experiment ----------------------------------------------


@main.command("synth")
@click.option("-n", "n", type=int, default=50, show_default=True)
@click.option("--protected-first/--non-protected-first", default=False,
              help="Which group draws the higher score interval.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def cmd_synth(n, protected_first, seed, out):
    """Generate the two-interval synthetic training set as CSV."""
    query = deltr.generate_synthetic(n, protected_first, seed)
    if out:
        ltr_data.write_training_csv([query], ["score"], out)
        return
    writer = csv.writer(sys.stdout)
    writer.writerow(["query_id", "doc_id", "protected", "score", "judgment"])
    for doc, judgment in zip(query.docs, query.judgments):
        writer.writerow(
            [query.query_id, doc.doc_id, int(doc.protected),
             repr(doc.features[0]), repr(judgment)]
        )


@main.command("experiment")
@click.option("--gammas", required=True,
              help="Comma-separated non-negative gamma values.")
@click.option("--protected-first/--non-protected-first", default=False)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("-n", "n", type=int, default=50, show_default=True)
@click.option("--learning-rate", type=float, default=0.1, show_default=True)
@click.option("--iterations", type=int, default=500, show_default=True)
@click.option("--init-scale", type=float, default=0.01, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def cmd_experiment(gammas, protected_first, seed, n, learning_rate, iterations,
                   init_scale, out):
    """Gamma sweep on the synthetic data; one plot-ready CSV row per gamma."""
    try:
        gamma_values = [float(g) for g in gammas.split(",") if g.strip()]
    except ValueError:
        raise ValueError(f"cannot parse gamma list {gammas!r}")
    config = deltr.TrainConfig(
        learning_rate=learning_rate,
        iterations=iterations,
        seed=seed,
        init_scale=init_scale,
    )
    rows = deltr.run_gamma_experiment(gamma_values, protected_first, seed, config, n=n)
    with _open_out(out) as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["gamma", "exposure_gap", "avg_protected_position", "final_loss",
             "ranking_fingerprint"]
        )
        for row in rows:
            writer.writerow(
                [repr(row.gamma), repr(row.exposure_gap),
                 repr(row.avg_protected_position), repr(row.final_loss),
                 "|".join(row.ranking)]
            )


# -- service ------------------------------------------------------------------


@main.command("serve")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@_guarded
def cmd_serve(config_path):
    """Run the rescoring service; blocks until interrupted."""
    config = service.load_serve_config(config_path)
    server = service.create_server(config)
    host, port = server.server_address[:2]
    click.echo(f"listening on {host}:{port}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@main.command("ingest")
@click.option("--index", "index_name", required=True)
@click.option("--file", "file_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--url", default=None,
              help="Base URL of a running service; without it the file is "
                   "validated locally.")
@click.option("--snapshot-out", type=click.Path(dir_okay=False), default=None,
              help="Write the validated documents as a snapshot file.")
@_guarded
def cmd_ingest(index_name, file_path, url, snapshot_out):
    """Send documents to a running service, or validate them locally."""
    payload = Path(file_path).read_bytes()
    if url:
        request = urllib.request.Request(
            f"{url.rstrip('/')}/{index_name}/_ingest",
            data=payload,
            method="POST",
            headers={"Content-Type": "application/x-ndjson"},
        )
        try:
            with urllib.request.urlopen(request) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            try:
                detail = json.loads(detail).get("error", detail)
            except json.JSONDecodeError:
                pass
            raise ParseError(f"service rejected the batch: {detail}") from None
        except urllib.error.URLError as exc:
            raise OSError(f"cannot reach service at {url}: {exc.reason}") from None
        click.echo(json.dumps(body))
        return
    index = SearchIndex()
    count = index.ingest(payload)
    if snapshot_out:
        index.save_snapshot(snapshot_out)
    click.echo(json.dumps({"indexed": count}))


if __name__ == "__main__":
    main()
