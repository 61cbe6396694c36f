"""Hybrid Mamba/attention encoder with padding-safe masking."""

import json

import numpy as np

from . import _core
from ._core import (
    CLS,
    MASK,
    PAD,
    SEP,
    UNK,
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    InvalidMaskError,
    PatternError,
    TrainingError,
    VocabularyError,
    cosine_distance,
    mask_batch,
    parse_pattern,
    reference_patterns,
    selective_scan,
    synthetic_corpus,
)

__all__ = [
    "Model",
    "config",
    "probe_config",
    "train_config",
    "parameter_count",
    "padding_drift",
    "cli",
    "parse_pattern",
    "reference_patterns",
    "selective_scan",
    "synthetic_corpus",
    "mask_batch",
    "cosine_distance",
    "PAD",
    "CLS",
    "SEP",
    "MASK",
    "UNK",
    "ConfigError",
    "PatternError",
    "DimensionError",
    "InvalidMaskError",
    "VocabularyError",
    "CheckpointError",
    "TrainingError",
    "ContractError",
]


def config(**overrides):
    """Default encoder config with overrides applied and validated."""
    c = json.loads(_core.default_config())
    c.update(overrides)
    if "pattern" in overrides and "depth" not in overrides:
        c["depth"] = len(overrides["pattern"])
    return json.loads(_core.normalize_config(json.dumps(c)))


def probe_config(**overrides):
    c = json.loads(_core.probe_config())
    c.update(overrides)
    if "pattern" in overrides and "depth" not in overrides:
        c["depth"] = len(overrides["pattern"])
    return json.loads(_core.normalize_config(json.dumps(c)))


def train_config(**overrides):
    c = json.loads(_core.default_train_config())
    c.update(overrides)
    return c


def parameter_count(cfg):
    return _core.parameter_count(json.dumps(cfg))


def padding_drift(cfg, seed=0, sequences=8, pads=(0, 8, 16, 32, 64), modes=("none", "pre", "post", "pre+post")):
    """Drift table rows as dicts: psm_mode, pad_added, representation, mean_distance, std_distance, n_samples."""
    table = json.loads(_core.padding_drift(json.dumps(cfg), seed, sequences, list(pads), list(modes)))
    return table["rows"]


def cli(*args):
    return _core.cli([str(a) for a in args])


class Model:
    """Encoder with MLM head (and a pooling classifier when num_classes > 0)."""

    def __init__(self, cfg=None, seed=0, *, _impl=None):
        self._m = _impl if _impl is not None else _core._Model(json.dumps(cfg or config()), seed)

    @classmethod
    def load(cls, path):
        return cls(_impl=_core._Model.load(str(path)))

    @property
    def config(self):
        return json.loads(self._m.config())

    @property
    def num_parameters(self):
        return self._m.num_parameters()

    def parameter_names(self):
        return self._m.parameter_names()

    def __getitem__(self, name):
        return self._m.get_parameter(name)

    def __setitem__(self, name, values):
        self._m.set_parameter(name, np.asarray(values, dtype=np.float64))

    def encode(self, sequences, pad=0, psm_mode=""):
        """Final hidden states [B, T, D] for [CLS] seq [SEP] + pad PADs."""
        return self._m.encode(sequences, pad, psm_mode)

    def pool(self, sequences, mode="map", pad=0):
        return self._m.pool(sequences, mode, pad)

    def mlm_logits(self, sequences):
        return self._m.mlm_logits(sequences)

    def train(self, corpus, **overrides):
        return self._m.train(corpus, json.dumps(train_config(**overrides)))

    def evaluate(self, corpus, batch=32, seed=0):
        return self._m.evaluate(corpus, batch, seed)

    def save(self, path, step=0):
        self._m.save(str(path), step)
