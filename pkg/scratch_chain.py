"""Scratch: size the CPT -> TRM -> rerank chain for acceptance 8c/8d/9."""
import time

import numpy as np

from lodestone.config import RunConfig
from lodestone.evalkit import RunFile, ndcg_at_k
from lodestone.index import SearchHit, SearchResult, build, dense_search, hybrid_search, sparse_search
from lodestone.model import CrossScorer, Embedder
from lodestone.pipeline import BatchSchedule
from lodestone.synth import make_finetune_pairs, make_pretrain_pairs, make_qrels, make_world
from lodestone.train import train_contrastive, train_rerank, train_trm
from lodestone.index import rerank as rerank_fn

T0 = time.perf_counter()


def stamp(msg):
    print(f"[{time.perf_counter() - T0:6.1f}s] {msg}", flush=True)


world = make_world(n_topics=50, docs_per_topic=20, train_queries_per_topic=4,
                   test_queries_per_topic=1, seed=3)
qrels = make_qrels(world, world.test_queries)
stamp(f"world: {len(world.documents)} docs, {len(world.test_queries)} test queries")

cpt_pairs = make_pretrain_pairs(world, 500, seed=3)
ft_pairs = make_finetune_pairs(world, n_hard_negatives=8, seed=3)
stamp(f"pairs: {len(cpt_pairs)} pretrain, {len(ft_pairs)} finetune")

cfg_cpt = RunConfig(stage="contrastive-pretrain", seed=0, precision="float32",
                    num_layers=2, hidden_size=64, num_heads=2, ffn_inner=128,
                    max_seq_len=64, dropout=0.1, steps=500, batch_size=8, lr=1e-3,
                    max_query_len=16, max_doc_len=48)
res_cpt = train_contrastive(cfg_cpt, cpt_pairs)
stamp(f"CPT done, loss {res_cpt.rows[0]['loss']:.3f} -> {res_cpt.rows[-1]['loss']:.3f}")


def run_of(bundle, mode="dense", lam=0.003, d_search=None):
    embedder = Embedder(bundle, max_query_len=16, max_doc_len=48)
    docs = embedder.embed([(d.doc_id, d.text) for d in world.documents], kind="doc")
    queries = embedder.embed([(q, t) for q, t, _ in world.test_queries], kind="query")
    width = d_search or bundle.hidden_size
    dense_idx, inv_idx = build(docs, d_search=width)
    run = RunFile()
    for rec in queries:
        if mode == "dense":
            hits = dense_search(dense_idx, rec.dense, 100)
            run.rankings[rec.doc_id] = hits
        elif mode == "sparse":
            hits = sparse_search(inv_idx, rec.sparse, 100)
            run.rankings[rec.doc_id] = hits
        else:
            result = hybrid_search(dense_idx, inv_idx, rec.dense, rec.sparse, 100, lam,
                                   query_id=rec.doc_id)
            run.rankings[rec.doc_id] = [(h.doc_id, h.score) for h in result.hits]
    return run


run_cpt = run_of(res_cpt.bundle)
ndcg_cpt = ndcg_at_k(run_cpt, qrels, 10)
stamp(f"CPT dense nDCG@10 = {ndcg_cpt:.4f}")

toy_schedule = BatchSchedule(((64, 4, 2),))
cfg_trm = RunConfig(stage="trm-finetune", seed=0, precision="float32",
                    steps=150, lr=5e-4, max_query_len=16, max_doc_len=48,
                    schedule=toy_schedule)
res_trm = train_trm(cfg_trm, ft_pairs, init_from=res_cpt.bundle)
stamp(f"TRM done, loss {res_trm.rows[0]['loss']:.3f} -> {res_trm.rows[-1]['loss']:.3f}")

run_trm = run_of(res_trm.bundle)
ndcg_trm = ndcg_at_k(run_trm, qrels, 10)
stamp(f"TRM dense nDCG@10 = {ndcg_trm:.4f} (improves: {ndcg_trm > ndcg_cpt})")

run_sparse = run_of(res_trm.bundle, mode="sparse")
ndcg_sparse = ndcg_at_k(run_sparse, qrels, 10)
stamp(f"TRM sparse nDCG@10 = {ndcg_sparse:.4f}")
for lam in (0.001, 0.003, 0.01):
    run_h = run_of(res_trm.bundle, mode="hybrid", lam=lam)
    stamp(f"TRM hybrid lam={lam}: nDCG@10 = {ndcg_at_k(run_h, qrels, 10):.4f}")

# matryoshka halved width
run_трm32 = run_of(res_trm.bundle, d_search=32)
stamp(f"TRM dense d=32 nDCG@10 = {ndcg_at_k(run_трm32, qrels, 10):.4f}")

# reranker from the CPT encoder
cfg_rr = RunConfig(stage="rerank-finetune", seed=0, precision="float32",
                   steps=150, lr=5e-4, max_query_len=16, max_doc_len=48,
                   rerank_hard_negatives=6, rerank_random_negatives=4,
                   schedule=toy_schedule)
rr_pairs = make_finetune_pairs(world, n_hard_negatives=6, seed=7)
res_rr = train_rerank(cfg_rr, rr_pairs, init_from=res_cpt.bundle)
stamp(f"rerank ft done, loss {res_rr.rows[0]['loss']:.3f} -> {res_rr.rows[-1]['loss']:.3f}")

scorer = CrossScorer(res_rr.bundle, max_len=64)
doc_text = {d.doc_id: d.text for d in world.documents}
query_text = {q: t for q, t, _ in world.test_queries}
run_rr = RunFile()
t_rr = time.perf_counter()
for qid, ranking in run_trm.rankings.items():
    hits = [SearchHit(d, s, s, 0.0) for d, s in ranking]
    scores = scorer.score_pairs(query_text[qid], [doc_text[h.doc_id] for h in hits[:100]])
    by_doc = dict(zip([h.doc_id for h in hits[:100]], scores))
    out = rerank_fn(SearchResult(qid, hits), lambda d: by_doc[d], top_n=100)
    run_rr.rankings[qid] = [(h.doc_id, h.score) for h in out.hits]
stamp(f"rerank eval took {time.perf_counter()-t_rr:.1f}s")
ndcg_rr = ndcg_at_k(run_rr, qrels, 10)
stamp(f"reranked nDCG@10 = {ndcg_rr:.4f} (improves over first stage {ndcg_trm:.4f}: {ndcg_rr > ndcg_trm})")
