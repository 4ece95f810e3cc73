"""Operator CLI: synth, train, embed, index, search, rerank, eval, bench.

Seeded commands are byte-reproducible in their delimited artifacts (timing
columns excepted); each CSV-emitting command also renders a PNG figure next
to the CSV unless --no-figures is passed. LODESTONE_THREADS controls query
fan-out during search.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from .bench import run_bench, skew_lengths, write_bench_csv
from .config import RunConfig
from .encoder import EncoderConfig
from .evalkit import load_qrels, load_run, metric_rows, write_metrics_csv
from .index import (
    DEFAULT_LAMBDA_SPARSE,
    DEFAULT_RERANK_DEPTH,
    SearchHit,
    SearchResult,
    build,
    dense_search,
    hybrid_search,
    load_index,
    rerank as rerank_candidates,
    save_index,
    sparse_search,
    write_run,
)
from .model import CrossScorer, Embedder, load_bundle, save_bundle
from .pipeline import BatchSchedule, load_corpus, load_pairs
from .representation import read_embeddings, write_embeddings
from .synth import emit_world, make_world
from .train import run_stage, write_loss_csv


@click.group()
def main():
    """Desk-scale long-context hybrid retrieval workbench."""


def _maybe_figure(render, csv_path: Path, enabled: bool) -> None:
    if not enabled:
        return
    out = csv_path.with_suffix(".png")
    render(csv_path, out)
    click.echo(f"figure -> {out}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--topics", default=50, show_default=True)
@click.option("--docs-per-topic", default=20, show_default=True)
@click.option("--train-queries", default=4, show_default=True,
              help="Training queries per topic.")
@click.option("--test-queries", default=1, show_default=True,
              help="Held-out queries per topic.")
@click.option("--pretrain-pairs", default=2000, show_default=True)
@click.option("--hard-negatives", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out_dir, topics, docs_per_topic, train_queries, test_queries,
          pretrain_pairs, hard_negatives, seed):
    """Generate a topic-structured synthetic corpus with queries and qrels."""
    world = make_world(n_topics=topics, docs_per_topic=docs_per_topic,
                       train_queries_per_topic=train_queries,
                       test_queries_per_topic=test_queries, seed=seed)
    paths = emit_world(out_dir, world, n_pretrain_pairs=pretrain_pairs,
                       n_hard_negatives=hard_negatives, seed=seed)
    for name, path in paths.items():
        click.echo(f"{name} -> {path}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@main.command()
@click.option("--stage", type=click.Choice(["mlm-short", "mlm-long",
                                            "contrastive-pretrain", "trm-finetune",
                                            "rerank-finetune"]), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="JSON RunConfig; explicit flags override it.")
@click.option("--corpus", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--pairs", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--init-from", type=click.Path(exists=True, path_type=Path), default=None,
              help="Checkpoint directory to continue from.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--schedule", "schedule_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Batch schedule file (bound batch sub_batch lines).")
@click.option("--seed", type=int, default=None)
@click.option("--precision", type=click.Choice(["float32", "float64"]), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--rope-base", type=float, default=None)
@click.option("--figures/--no-figures", default=True, show_default=True)
def train(stage, config_path, corpus, pairs, init_from, out_dir, schedule_path,
          seed, precision, steps, batch_size, lr, rope_base, figures):
    """Run one training stage and save checkpoint + per-step loss CSV."""
    overrides = {"stage": stage, "seed": seed, "precision": precision, "steps": steps,
                 "batch_size": batch_size, "lr": lr, "rope_base": rope_base}
    if config_path is not None:
        cfg = RunConfig.from_json(config_path, overrides)
    else:
        if stage is None:
            raise click.UsageError("--stage is required without --config")
        cfg = RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    if schedule_path is not None:
        cfg.schedule = BatchSchedule.from_file(schedule_path)
    docs = load_corpus(corpus) if corpus else None
    examples = load_pairs(pairs) if pairs else None
    bundle_in = load_bundle(init_from) if init_from else None
    result = run_stage(cfg, corpus=docs, pairs=examples, init_from=bundle_in)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_bundle(out_dir, result.bundle)
    loss_csv = out_dir / "loss.csv"
    write_loss_csv(loss_csv, result.rows)
    click.echo(f"checkpoint -> {out_dir}")
    click.echo(f"loss log -> {loss_csv}")
    if result.rows:
        first, last = result.rows[0]["loss"], result.rows[-1]["loss"]
        click.echo(f"loss: {first:.4f} -> {last:.4f} over {len(result.rows)} steps")
        from .report import render_loss_figure

        _maybe_figure(render_loss_figure, loss_csv, figures)


# ---------------------------------------------------------------------------
# embed / index
# ---------------------------------------------------------------------------


@main.command()
@click.option("--model", "model_dir", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, path_type=Path),
              help="JSONL with id/text fields.")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--kind", type=click.Choice(["doc", "query"]), default="doc",
              show_default=True)
@click.option("--max-query-len", default=512, show_default=True)
@click.option("--max-doc-len", default=1024, show_default=True)
def embed(model_dir, input_path, out_path, kind, max_query_len, max_doc_len):
    """Extract dense+sparse representations into a JSONL dump."""
    bundle = load_bundle(model_dir)
    embedder = Embedder(bundle, max_query_len=max_query_len, max_doc_len=max_doc_len)
    docs = load_corpus(input_path)
    records = embedder.embed([(d.doc_id, d.text) for d in docs], kind=kind)
    write_embeddings(out_path, records)
    click.echo(f"{len(records)} embeddings -> {out_path}")


@main.command(name="index")
@click.option("--embeddings", "emb_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--d-search", type=int, default=None,
              help="Matryoshka search width (default: full embedding width).")
def index_cmd(emb_path, out_dir, d_search):
    """Build and persist the dense matrix and sparse postings."""
    records = list(read_embeddings(emb_path))
    if not records:
        raise click.UsageError(f"no embeddings found in {emb_path}")
    width = d_search or records[0].dense.dim
    dense, inverted = build(records, d_search=width)
    save_index(out_dir, dense, inverted, meta={"source": str(emb_path)})
    click.echo(f"index ({len(dense)} docs, d_search={width}) -> {out_dir}")


# ---------------------------------------------------------------------------
# search / rerank
# ---------------------------------------------------------------------------


def _run_one_query(mode, dense_idx, inverted_idx, record, k, lambda_sparse):
    if mode == "dense":
        hits = dense_search(dense_idx, record.dense, k)
        return SearchResult(record.doc_id,
                            [SearchHit(d, s, s, 0.0) for d, s in hits])
    if mode == "sparse":
        hits = sparse_search(inverted_idx, record.sparse, k)
        return SearchResult(record.doc_id,
                            [SearchHit(d, s, 0.0, s) for d, s in hits])
    return hybrid_search(dense_idx, inverted_idx, record.dense, record.sparse,
                         k, lambda_sparse, query_id=record.doc_id)


@main.command()
@click.option("--index", "index_dir", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--queries", "queries_path", required=True,
              type=click.Path(exists=True, path_type=Path),
              help="Embedded queries (output of `embed --kind query`).")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--k", default=1000, show_default=True)
@click.option("--lambda-sparse", default=DEFAULT_LAMBDA_SPARSE, show_default=True)
@click.option("--mode", type=click.Choice(["hybrid", "dense", "sparse"]),
              default="hybrid", show_default=True)
@click.option("--tag", default="lodestone", show_default=True)
def search(index_dir, queries_path, out_path, k, lambda_sparse, mode, tag):
    """First-stage retrieval to a TREC run file."""
    dense_idx, inverted_idx, _ = load_index(index_dir)
    queries = list(read_embeddings(queries_path))
    threads = int(os.environ.get("LODESTONE_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda rec: _run_one_query(mode, dense_idx, inverted_idx, rec, k,
                                           lambda_sparse),
                queries,
            ))
    else:
        results = [_run_one_query(mode, dense_idx, inverted_idx, rec, k, lambda_sparse)
                   for rec in queries]
    write_run(out_path, results, tag=tag)
    click.echo(f"{len(results)} queries ({mode}) -> {out_path}")


@main.command()
@click.option("--run", "run_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--model", "model_dir", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--queries", "queries_path", required=True,
              type=click.Path(exists=True, path_type=Path),
              help="JSONL with query id/text.")
@click.option("--corpus", "corpus_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--rerank-depth", default=DEFAULT_RERANK_DEPTH, show_default=True)
@click.option("--tag", default="lodestone-rerank", show_default=True)
def rerank(run_path, model_dir, queries_path, corpus_path, out_path, rerank_depth, tag):
    """Cross-encoder re-scoring of the top candidates of a run."""
    bundle = load_bundle(model_dir)
    scorer = CrossScorer(bundle)
    run = load_run(run_path)
    query_text = {d.doc_id: d.text for d in load_corpus(queries_path)}
    doc_text = {d.doc_id: d.text for d in load_corpus(corpus_path)}
    results = []
    for qid, ranking in run.rankings.items():
        if qid not in query_text:
            raise click.UsageError(f"query {qid} missing from {queries_path}")
        hits = [SearchHit(doc, score, score, 0.0) for doc, score in ranking]
        head = hits[:rerank_depth]
        scores = scorer.score_pairs(query_text[qid],
                                    [doc_text[h.doc_id] for h in head])
        by_doc = {h.doc_id: s for h, s in zip(head, scores)}
        reranked = rerank_candidates(SearchResult(qid, hits),
                                     lambda doc_id: by_doc[doc_id],
                                     top_n=rerank_depth)
        results.append(reranked)
    write_run(out_path, results, tag=tag)
    click.echo(f"reranked top {rerank_depth} of {len(results)} queries -> {out_path}")


# ---------------------------------------------------------------------------
# eval / bench
# ---------------------------------------------------------------------------


@main.command(name="eval")
@click.option("--run", "run_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--qrels", "qrels_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--ndcg-k", default=10, show_default=True)
@click.option("--recall-k", default=20, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def eval_cmd(run_path, qrels_path, out_path, ndcg_k, recall_k, figures):
    """Score a run against qrels into a metrics CSV."""
    run = load_run(run_path)
    qrels = load_qrels(qrels_path)
    rows = metric_rows(run, qrels, ndcg_k=ndcg_k, recall_k=recall_k)
    write_metrics_csv(out_path, rows)
    for metric, qid, value in rows:
        if qid == "ALL":
            click.echo(f"{metric}: {value:.4f}")
    from .report import render_metrics_figure

    _maybe_figure(render_metrics_figure, Path(out_path), figures)


@main.command()
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--num-seqs", default=32, show_default=True)
@click.option("--long-len", default=2048, show_default=True)
@click.option("--short-len", default=32, show_default=True)
@click.option("--layers", default=1, show_default=True)
@click.option("--hidden-size", default=64, show_default=True)
@click.option("--num-heads", default=2, show_default=True)
@click.option("--ffn-inner", default=128, show_default=True)
@click.option("--precision", type=click.Choice(["float32", "float64"]),
              default="float32", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--repeats", default=1, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def bench(out_path, num_seqs, long_len, short_len, layers, hidden_size, num_heads,
          ffn_inner, precision, seed, repeats, figures):
    """Time padded vs unpadded encoding on a length-skewed batch."""
    config = EncoderConfig(
        num_layers=layers, hidden_size=hidden_size, num_heads=num_heads,
        ffn_inner=ffn_inner, vocab_size=256, rope_base=10000.0,
        max_seq_len=long_len, dropout=0.0, precision=precision,
    )
    lengths = skew_lengths(num_seqs, long_len, short_len)
    rows = run_bench(config, lengths, seed=seed, repeats=repeats)
    write_bench_csv(out_path, rows)
    by_path = {r.path: r for r in rows}
    speedup = by_path["padded"].wall_time_s / max(by_path["unpadded"].wall_time_s, 1e-9)
    flop_ratio = by_path["unpadded"].total_multiplies / by_path["padded"].total_multiplies
    click.echo(f"wall time: padded {by_path['padded'].wall_time_s:.3f}s, "
               f"unpadded {by_path['unpadded'].wall_time_s:.3f}s "
               f"({speedup:.1f}x faster unpadded)")
    click.echo(f"multiply count ratio (unpadded/padded): {flop_ratio:.4f}")
    click.echo(f"bench CSV -> {out_path}")
    from .report import render_bench_figure

    _maybe_figure(render_bench_figure, Path(out_path), figures)


if __name__ == "__main__":
    main()
