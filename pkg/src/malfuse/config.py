"""Pipeline configuration: JSON file over defaults, with a content fingerprint.

Every field has a default so the synthetic experiment runs with zero
configuration. The fingerprint (sha256 over the canonical effective config)
is embedded in all reports so outputs stay traceable to their settings.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import InvalidConfig

DEFAULT_CONFIG: dict = {
    "paths": {
        "bytes_root": "",
        "asm_root": "",
        "manifest": "",
        "workdir": "work",
    },
    "imaging": {
        "side": 224,
        "row_cap": 8192,
    },
    "model": {
        "branches": ["gs", "eg", "sh"],
        "conv_blocks": [[8, 1], [16, 1]],
        "feature_dim": 64,
        "fusion": "concat",
        "classes": 9,
    },
    "train": {
        "epochs": 10,
        "batch": 16,
        "lr": 0.01,
        "momentum": 0.9,
        "seeds": [1, 2, 3, 4, 5],
        "train_fraction": 0.8,
        "split_seed": 7,
    },
    "report": {
        "alpha": 0.5,
    },
    "synthetic": {
        "families": 9,
        "samples_per_family": 60,
        "minority_family": 6,
        "minority_count": 6,
        "corpus_seed": 2015,
        "side": 32,
        "epochs": 10,
    },
    "jobs": 1,
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise InvalidConfig(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidConfig(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


class PipelineConfig:
    """Effective configuration: defaults deep-merged with an optional JSON file."""

    def __init__(self, data: dict):
        self.data = data
        self._validate()

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "PipelineConfig":
        data = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                data = _merge(data, json.load(fh))
        if overrides:
            data = _merge(data, overrides)
        return cls(data)

    def _validate(self) -> None:
        d = self.data
        if d["imaging"]["side"] < 16 or d["synthetic"]["side"] < 16:
            raise InvalidConfig("imaging side must be >= 16")
        if d["imaging"]["row_cap"] < 1:
            raise InvalidConfig("row_cap must be >= 1")
        if not d["train"]["seeds"]:
            raise InvalidConfig("train.seeds must be non-empty")
        if not 0.0 < d["train"]["train_fraction"] < 1.0:
            raise InvalidConfig("train_fraction outside (0, 1)")
        if not 0.0 <= d["report"]["alpha"] <= 1.0:
            raise InvalidConfig("report.alpha outside [0, 1]")
        if d["jobs"] < 1:
            raise InvalidConfig("jobs must be >= 1")
        branches = d["model"]["branches"]
        if not branches or len(branches) > 3 or len(set(branches)) != len(branches):
            raise InvalidConfig(f"model.branches {branches!r} must be 1..3 distinct modalities")
        for b in branches:
            if b not in ("gs", "eg", "sh"):
                raise InvalidConfig(f"unknown modality {b!r}")
        fusion = d["model"]["fusion"]
        if fusion is not None and fusion not in ("add", "avg", "max", "concat"):
            raise InvalidConfig(f"unknown fusion operator {fusion!r}")
        if (fusion is not None) != (len(branches) >= 2):
            raise InvalidConfig("model.fusion must be set iff branches >= 2")

    def __getitem__(self, key: str):
        return self.data[key]

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()

    def workdir(self) -> Path:
        return Path(self.data["paths"]["workdir"])
