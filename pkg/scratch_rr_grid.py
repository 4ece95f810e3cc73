"""Reranker grid: tau x lr x steps x query volume, against cached CPT."""
import sys
import time

import numpy as np

from lodestone.config import RunConfig
from lodestone.evalkit import RunFile, ndcg_at_k
from lodestone.index import SearchHit, SearchResult, build, dense_search
from lodestone.index import rerank as rerank_fn
from lodestone.losses import LossConfig
from lodestone.model import CrossScorer, Embedder, load_bundle
from lodestone.pipeline import BatchSchedule
from lodestone.synth import make_finetune_pairs, make_qrels, make_world
from lodestone.train import train_rerank

T0 = time.perf_counter()
def stamp(msg): print(f"[{time.perf_counter() - T0:6.1f}s] {msg}", flush=True)

world = make_world(n_topics=50, docs_per_topic=20, train_queries_per_topic=4, seed=3)
qrels = make_qrels(world, world.test_queries)
cpt = load_bundle("/tmp/tune/cpt")
doc_text = {d.doc_id: d.text for d in world.documents}
query_text = {q: t for q, t, _ in world.test_queries}

embedder = Embedder(cpt, max_query_len=16, max_doc_len=48)
docs = embedder.embed([(d.doc_id, d.text) for d in world.documents], "doc")
queries = embedder.embed([(q, t) for q, t, _ in world.test_queries], "query")
dense_idx, _ = build(docs, d_search=64)
run_first = RunFile()
for rec in queries:
    run_first.rankings[rec.doc_id] = dense_search(dense_idx, rec.dense, 100)
ndcg_first = ndcg_at_k(run_first, qrels, 10)
stamp(f"first-stage dense nDCG@10 = {ndcg_first:.4f}")


def eval_reranker(bundle):
    scorer = CrossScorer(bundle, max_len=64)
    run_rr = RunFile()
    for qid, ranking in run_first.rankings.items():
        hits = [SearchHit(d, s, s, 0.0) for d, s in ranking]
        scores = scorer.score_pairs(query_text[qid], [doc_text[h.doc_id] for h in hits[:100]])
        by_doc = dict(zip([h.doc_id for h in hits[:100]], scores))
        out = rerank_fn(SearchResult(qid, hits), lambda d: by_doc[d], top_n=100)
        run_rr.rankings[qid] = [(h.doc_id, h.score) for h in out.hits]
    return ndcg_at_k(run_rr, qrels, 10)


toy_schedule = BatchSchedule(((64, 4, 2),))
tau = float(sys.argv[1])
lr = float(sys.argv[2])
steps = int(sys.argv[3])
rr_pairs = make_finetune_pairs(world, n_hard_negatives=6, seed=7)
cfg = RunConfig(stage="rerank-finetune", seed=0, steps=steps, lr=lr,
                max_query_len=16, max_doc_len=48, schedule=toy_schedule,
                loss=LossConfig(tau_dense=tau))
res = train_rerank(cfg, rr_pairs, init_from=cpt)
stamp(f"tau={tau} lr={lr} steps={steps}: loss {res.rows[0]['loss']:.3f} -> "
      f"{np.mean([r['loss'] for r in res.rows[-20:]]):.3f}")
stamp(f"  reranked nDCG@10 = {eval_reranker(res.bundle):.4f} (first {ndcg_first:.4f})")
