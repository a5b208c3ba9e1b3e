"""Configuration and glue from documents to network samples and extractions."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .doc_model import Document, GroundTruth
from .embedder import (
    DEFAULT_ALPHABET,
    ContextMixer,
    EmbeddingTable,
    ExternalEmbedder,
    HashEmbedder,
    TableEmbedder,
    train_word2vec,
)
from .extract_eval import ExtractionResult, extract
from .grid_builder import REPRESENTATIONS, GridSpec, build_inputs, rasterize_targets
from .network import NetworkConfig, Sample, TrainConfig, predict
from .preprocess import Vocab, build_vocab, tokenize_document

DEFAULTS: dict[str, Any] = {
    "representation": "chargrid",
    "combined_with": "bertgrid",
    "grid": [64, 64],
    "alphabet": DEFAULT_ALPHABET,
    "vocab": {"max_size": 2000, "min_freq": 2, "path": None},
    "embedder": {
        "kind": "hash",
        "dim": 32,
        "seed": 0,
        "context_window": 2,
        "context_alpha": 0.5,
        "table": None,
        "external_dir": None,
    },
    "word2vec": {"window": 2, "negatives": 5, "epochs": 5, "lr": 0.05, "seed": 0},
    "network": {"base_channels": 16, "num_down": 2, "seed": 0, "box_weight": 1.0},
    "train": {"epochs": 30, "lr": 0.05, "momentum": 0.9, "batch_size": 8, "schedule": "cosine", "clip_norm": 5.0, "seed": 0},
    "iou_threshold": 0.5,
}


WORD_LEVEL = Vocab([])


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    """Declarative pipeline settings; unknown keys are rejected."""

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "PipelineConfig":
        d = d or {}
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls.from_dict({})
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def override(self, dotted: dict) -> "PipelineConfig":
        """Apply ``{"train.lr": 0.0}``-style overrides (None values skipped)."""
        vals = copy.deepcopy(self.values)
        for key, value in dotted.items():
            if value is None:
                continue
            node = vals
            *path, last = key.split(".")
            for p in path:
                node = node[p]
            node[last] = value
        cfg = PipelineConfig(vals)
        cfg.check()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def check(self) -> None:
        v = self.values
        if v["representation"] not in REPRESENTATIONS:
            raise ConfigError(f"representation must be one of {REPRESENTATIONS}")
        if v["combined_with"] not in ("wordgrid", "bertgrid"):
            raise ConfigError("combined_with must be wordgrid or bertgrid")
        kind = v["embedder"]["kind"]
        if kind not in ("hash", "word2vec", "external"):
            raise ConfigError(f"unknown embedder kind {kind!r}")
        if kind == "external" and not v["embedder"]["external_dir"]:
            raise ConfigError("embedder.kind=external requires embedder.external_dir")
        if kind == "external" and self.dense_kind == "wordgrid":
            raise ConfigError("wordgrid is non-contextual; external vectors belong to bertgrid")
        if len(v["grid"]) != 2 or min(v["grid"]) <= 0:
            raise ConfigError("grid must be [height, width] with positive values")
        if not 0 < v["iou_threshold"] < 1:
            raise ConfigError("iou_threshold must lie in (0, 1)")

    @property
    def representation(self) -> str:
        return self.values["representation"]

    @property
    def dense_kind(self) -> str | None:
        """wordgrid / bertgrid for dense inputs, None for a pure chargrid."""
        rep = self.representation
        if rep == "chargrid":
            return None
        return self.values["combined_with"] if rep == "combined" else rep

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.values["grid"])

    @property
    def char_spec(self) -> GridSpec:
        return GridSpec(*self.hw, len(self.values["alphabet"]) + 1)

    @property
    def dense_spec(self) -> GridSpec:
        return GridSpec(*self.hw, self.values["embedder"]["dim"])

    def input_depths(self) -> tuple[int, ...]:
        rep = self.representation
        if rep == "chargrid":
            return (self.char_spec.depth,)
        if rep == "combined":
            return (self.char_spec.depth, self.dense_spec.depth)
        return (self.dense_spec.depth,)

    def network_config(self) -> NetworkConfig:
        n = self.values["network"]
        return NetworkConfig(
            input_depths=self.input_depths(),
            base_channels=n["base_channels"],
            num_down=n["num_down"],
            seed=n["seed"],
            box_weight=n["box_weight"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])


class _PerDocExternal:
    """Resolves ``<external_dir>/<doc_id>.embd`` per document."""

    def __init__(self, directory: str | Path, dim: int):
        self.directory = Path(directory)
        self.dim = dim

    def for_doc(self, doc: Document):
        return ExternalEmbedder(self.directory / f"{doc.doc_id}.embd", self.dim)


@dataclass
class Pipeline:
    cfg: PipelineConfig
    vocab: Vocab | None = None
    table: EmbeddingTable | None = None

    @property
    def needs_vocab(self) -> bool:
        return self.cfg.dense_kind is not None

    def fit(self, docs: Sequence[Document]) -> "Pipeline":
        """Build the vocabulary (and word2vec table, if configured and absent) from training docs."""
        if not self.needs_vocab:
            return self
        if self.vocab is None:
            v = self.cfg["vocab"]
            self.vocab = Vocab.load(v["path"]) if v["path"] else build_vocab(docs, v["max_size"], v["min_freq"])
        e = self.cfg["embedder"]
        if e["kind"] == "word2vec" and self.table is None:
            if e["table"]:
                self.table = EmbeddingTable.load(e["table"])
            else:
                w = self.cfg["word2vec"]
                seqs = [tokenize_document(d, self.vocab) for d in docs]
                self.table = train_word2vec(
                    seqs, len(self.vocab), e["dim"], w["window"], w["negatives"], w["epochs"], w["lr"], w["seed"]
                )
        return self

    def embedder_for(self, doc: Document):
        e = self.cfg["embedder"]
        kind = self.cfg.dense_kind
        if e["kind"] == "external":
            return _PerDocExternal(e["external_dir"], e["dim"]).for_doc(doc)
        if e["kind"] == "word2vec":
            if self.table is None:
                raise ConfigError("word2vec embedder has no table; call fit() or set embedder.table")
            base = TableEmbedder(self.table)
        else:
            base = HashEmbedder(e["dim"], e["seed"])
        if kind == "bertgrid":
            return ContextMixer(base, e["context_window"], e["context_alpha"])
        return base

    def inputs(self, doc: Document, seq=None) -> list[np.ndarray]:
        cfg = self.cfg
        if self.needs_vocab and seq is None:
            seq = tokenize_document(doc, self.vocab)
        grids = build_inputs(
            doc,
            cfg.representation,
            vocab=self.vocab,
            embedder=self.embedder_for(doc) if self.needs_vocab else None,
            spec_char=cfg.char_spec,
            spec_dense=cfg.dense_spec,
            alphabet=cfg["alphabet"],
            seq=seq,
        )
        return [g.values for g in grids]

    def sequence(self, doc: Document, gt: GroundTruth | None = None):
        # without a dense input every word stays one [UNK] piece, so decoding votes per word
        vocab = self.vocab if self.vocab is not None else WORD_LEVEL
        return tokenize_document(doc, vocab, gt)

    def sample(self, doc: Document, gt: GroundTruth) -> Sample:
        seq = self.sequence(doc, gt)
        t = rasterize_targets(seq, doc, gt, self.cfg.hw)
        return Sample(self.inputs(doc, seq if self.needs_vocab else None), t.mask, t.boxes, t.valid)

    def extract(self, doc: Document, params: dict, net_cfg: NetworkConfig) -> ExtractionResult:
        seq = self.sequence(doc)
        out = predict(self.inputs(doc, seq if self.needs_vocab else None), params, net_cfg)
        return extract(out.seg_logits[0], out.box_preds[0], seq, doc, self.cfg["iou_threshold"])
