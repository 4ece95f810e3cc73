"""Scratch: size the toy training stages for the acceptance suite."""
import time

import numpy as np

from lodestone.config import RunConfig
from lodestone.synth import make_world, make_pretrain_pairs, make_finetune_pairs
from lodestone.train import train_mlm, train_contrastive, in_batch_retrieval_accuracy

t0 = time.perf_counter()

# --- 8a: MLM on 200 docs, halve loss within 300 steps
world_small = make_world(n_topics=10, docs_per_topic=20, seed=0)
print(f"small world: {len(world_small.documents)} docs")
cfg = RunConfig(stage="mlm-short", seed=0, precision="float32",
                num_layers=2, hidden_size=64, num_heads=2, ffn_inner=128,
                max_seq_len=64, dropout=0.1, steps=300, batch_size=8, lr=1e-3,
                chunk_len=48)
t = time.perf_counter()
res = train_mlm(cfg, world_small.documents)
dt = time.perf_counter() - t
first = np.mean([r["loss"] for r in res.rows[:10]])
last = np.mean([r["loss"] for r in res.rows[-10:]])
print(f"MLM: {dt:.1f}s, loss {res.rows[0]['loss']:.3f} first10avg {first:.3f} -> last10avg {last:.3f} "
      f"(halved: {last <= 0.5 * first}, vs step0: {last <= 0.5 * res.rows[0]['loss']})")

# --- 8b: contrastive, 500 pairs, batch 8, tau 0.01, 500 steps -> >=95% acc
world = make_world(n_topics=50, docs_per_topic=20, seed=1)
pairs = make_pretrain_pairs(world, 500, seed=1)
cfg2 = RunConfig(stage="contrastive-pretrain", seed=0, precision="float32",
                 num_layers=2, hidden_size=64, num_heads=2, ffn_inner=128,
                 max_seq_len=64, dropout=0.1, steps=500, batch_size=8, lr=1e-3,
                 max_query_len=16, max_doc_len=48)
t = time.perf_counter()
res2 = train_contrastive(cfg2, pairs)
dt = time.perf_counter() - t
acc = in_batch_retrieval_accuracy(res2.bundle, pairs, batch_size=8,
                                  max_query_len=16, max_doc_len=48)
train_acc_tail = np.mean([r["accuracy"] for r in res2.rows[-50:]])
print(f"CPT: {dt:.1f}s, loss {res2.rows[0]['loss']:.3f} -> {res2.rows[-1]['loss']:.3f}, "
      f"eval in-batch acc {acc:.3f}, train tail acc {train_acc_tail:.3f}")

print(f"total {time.perf_counter() - t0:.1f}s")
