"""Run configuration for the training CLI: stage tags, defaults, JSON I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .losses import LossConfig
from .pipeline import EMBED_SCHEDULE, RERANK_SCHEDULE, BatchSchedule, PipelineError

STAGES = ("mlm-short", "mlm-long", "contrastive-pretrain", "trm-finetune", "rerank-finetune")

# Stage-consistent rotary bases: the short/long MLM curriculum plus the
# reverse-scaled base (160000 / 8 = 20000) used from contrastive
# pre-training onward.
STAGE_ROPE_BASE = {
    "mlm-short": 10000.0,
    "mlm-long": 160000.0,
    "contrastive-pretrain": 20000.0,
    "trm-finetune": 20000.0,
    "rerank-finetune": 20000.0,
}

STAGE_CHUNK_LEN = {"mlm-short": 2048, "mlm-long": 8192}


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stage: str
    seed: int = 0
    precision: str = "float32"

    # encoder geometry (used when not initializing from a checkpoint)
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 2
    ffn_inner: int = 128
    max_seq_len: int = 128
    dropout: float = 0.1
    rope_base: float | None = None  # None -> stage default

    # optimization
    steps: int = 300
    batch_size: int = 8
    lr: float = 5e-4
    warmup_ratio: float = 0.06
    weight_decay: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6

    # stage knobs
    mask_prob: float = 0.30
    chunk_len: int | None = None  # None -> stage default, capped by max_seq_len
    keep_short_prob: float = 0.25
    alpha: float = 0.5
    sampling_unit: str = "docs"  # or "tokens"
    max_query_len: int = 512
    max_doc_len: int = 1024
    n_hard_negatives: int = 8
    rerank_hard_negatives: int = 6
    rerank_random_negatives: int = 4

    loss: LossConfig = field(default_factory=LossConfig)
    schedule: BatchSchedule | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise RunConfigError(f"unknown stage '{self.stage}' (choose from {STAGES})")
        if self.rope_base is None:
            self.rope_base = STAGE_ROPE_BASE[self.stage]

    @property
    def effective_chunk_len(self) -> int:
        base = self.chunk_len or STAGE_CHUNK_LEN.get(self.stage, self.max_seq_len)
        return min(base, self.max_seq_len)

    def effective_schedule(self) -> BatchSchedule:
        if self.schedule is not None:
            return self.schedule
        return RERANK_SCHEDULE if self.stage == "rerank-finetune" else EMBED_SCHEDULE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["schedule"] = list(self.schedule.buckets) if self.schedule else None
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        if isinstance(raw.get("loss"), dict):
            raw["loss"] = LossConfig.from_dict(raw["loss"])
        if raw.get("schedule") is not None and not isinstance(raw["schedule"], BatchSchedule):
            raw["schedule"] = BatchSchedule(tuple(tuple(b) for b in raw["schedule"]))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise RunConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        """Load a JSON config; explicit flag overrides win over file values."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value
        return cls.from_dict(raw)
