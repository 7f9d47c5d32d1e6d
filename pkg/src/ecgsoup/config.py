"""Strict JSON run configuration shared by all CLI commands.

Unknown keys are rejected at every level. Relative paths inside a config
file are resolved against the directory holding that file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .aggregate import AggregationMode, DownstreamConfig
from .backbone import LEAD_NAMES, VitConfig
from .data.synth import SyntheticSpec
from .errors import ConfigError
from .pretrain import DecoderConfig, PretrainConfig

PRECISIONS = {"float64": np.float64, "float32": np.float32}


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(data).__name__}")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class EvaluationConfig:
    agg: str = "ppa"
    folds: int = 10
    test_folds: list = field(default_factory=lambda: [0])
    split_seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    sweep_layers: bool = False
    freeze_gate_uniform: bool = False
    cache_activations: bool = True

    def __post_init__(self):
        AggregationMode.parse(self.agg)
        if self.folds < 3:
            raise ConfigError("evaluation needs at least 3 folds (train, validation, test)")
        if not self.test_folds or any(not 0 <= f < self.folds for f in self.test_folds):
            raise ConfigError(f"test_folds must be indices in 0..{self.folds - 1}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.freeze_gate_uniform and AggregationMode.parse(self.agg).kind != "pma":
            raise ConfigError("freeze_gate_uniform only applies to agg='pma'")


@dataclass
class AnalyzeConfig:
    records: int = 16
    query_lead: str = "V2"
    query_patch: int = 4
    sample: int = 0

    def __post_init__(self):
        if self.query_lead.upper() not in LEAD_NAMES:
            raise ConfigError(f"query_lead must be one of {LEAD_NAMES}")
        self.query_lead = self.query_lead.upper()
        if self.records < 1 or self.query_patch < 0 or self.sample < 0:
            raise ConfigError("records must be positive; query_patch and sample non-negative")


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    out: str | None = None
    data: str | None = None
    checkpoint: str | None = None
    count: int = 256
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: VitConfig = field(default_factory=VitConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    runs: list = field(default_factory=list)

    _SECTIONS = {
        "synth": SyntheticSpec,
        "model": VitConfig,
        "decoder": DecoderConfig,
        "pretrain": PretrainConfig,
        "downstream": DownstreamConfig,
        "evaluation": EvaluationConfig,
        "analyze": AnalyzeConfig,
    }

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.count < 0:
            raise ConfigError("count must be non-negative")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def from_dict(cls, data, base_dir=None):
        if not isinstance(data, dict):
            raise ConfigError("the configuration must be a JSON object")
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        for name, section in cls._SECTIONS.items():
            if name in data:
                data[name] = _strict(section, data[name], name)
        if base_dir is not None:
            for key in ("out", "data", "checkpoint"):
                if data.get(key):
                    data[key] = str(Path(base_dir) / data[key])
            data["runs"] = [str(Path(base_dir) / r) for r in data.get("runs", [])]
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in self._SECTIONS:
                value = _section_dict(value)
            out[f.name] = value
        return out


def _section_dict(obj):
    from dataclasses import asdict

    d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    return json.loads(json.dumps(d, default=list))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw, base_dir=path.parent)


def write_resolved(config: RunConfig, out_dir, name="config.resolved.json"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
