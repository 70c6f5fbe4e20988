"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .clustering import KMeansConfig
from .errors import ConfigError
from .memory import MenmConfig
from .model import ModelConfig
from .ssl import SslConfig
from .stream import SyntheticConfig

VARIANTS = ("full", "no_ssm", "no_menm", "random_memory")
MEMORY_POLICY = {"full": "entropy", "no_ssm": "entropy", "no_menm": "random", "random_memory": "reservoir"}


@dataclass
class TrainConfig:
    batch_size: int = 32
    meta_steps: int = 10
    meta_lr: float = 1e-4
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    current_batch: int = 32
    replay_batch: int = 32
    variant: str = "full"
    seed: int = 0
    pretrain_epochs: int = 40
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    enhance_first: bool = False  # enhance memory before meta-training within a step
    retention: str = "next_subject"  # when m_j is measured: "next_subject" or "end"
    memory_embedding: str = "adapted"  # network embedding memory samples for centroids: "adapted" or "meta"
    first_batch: str = "classifier"  # naming of first-batch clusters: "classifier" or "cluster_ids"
    share_predictor: bool = True  # keep the predictor learned during inner adaptation
    mapping: str = "optimal"  # or "greedy"
    max_match_distance: float | None = None  # matched clusters farther than this are left unlabelled
    novel_clusters: str = "classifier"  # unmatched clusters: "classifier" (name absent classes by F) or "drop"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("stream batch size must be at least 2")
        if self.meta_steps < 1:
            raise ConfigError("meta_steps must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name, allowed in (("retention", ("next_subject", "end")), ("memory_embedding", ("adapted", "meta")),
                              ("first_batch", ("classifier", "classifier_bijective", "cluster_ids")), ("mapping", ("optimal", "greedy")),
                              ("novel_clusters", ("classifier", "drop"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    menm: MenmConfig = field(default_factory=MenmConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        self.check()

    def check(self):
        if (self.model.channels, self.model.length) != (self.synthetic.channels, self.synthetic.length):
            raise ConfigError("model channels/length must match the synthetic stream")
        if self.kmeans.k != self.model.n_classes:
            raise ConfigError("kmeans.k must equal model.n_classes")
        if self.synthetic.n_classes != self.model.n_classes:
            raise ConfigError("synthetic.n_classes must equal model.n_classes")

    def to_dict(self) -> dict:
        return asdict(self)

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_CLASSES = {"model": ModelConfig, "train": TrainConfig, "ssl": SslConfig, "kmeans": KMeansConfig,
            "menm": MenmConfig, "synthetic": SyntheticConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def desk_defaults() -> dict:
    """Desk-scale overrides: CPU-sized stream, larger inner learning rate, gated cluster matching."""
    return {
        "model": {"channels": 4, "length": 128, "preset": "desk", "embed_dim": 32, "n_classes": 4},
        "train": {"meta_lr": 1e-4, "max_match_distance": 0.15},
        "ssl": {"inner_lr": 3e-3},
        "menm": {"capacity": 200},
    }


def benchmark_overrides() -> dict:
    """Desk ablation benchmark: narrow class bands, per-subject band shift, memory under pressure."""
    return {
        "synthetic": {"bands": [[4, 7], [9, 12], [14, 17], [19, 22]], "band_shift": 2.0, "segments_per_run": 24},
        "menm": {"capacity": 100},
    }


def sanity_overrides() -> dict:
    """Noise-free stream with the default well-separated bands."""
    return {"synthetic": {"noise_std": 0.0, "segments_per_run": 24}, "menm": {"capacity": 100}}


def paper_defaults() -> dict:
    return {
        "model": {"channels": 32, "length": 896, "preset": "paper", "embed_dim": 128, "n_classes": 4,
                  "attention": True},
        "synthetic": {"channels": 32, "length": 896, "sample_rate_hz": 128.0},
        "train": {"meta_lr": 1e-4},
        "ssl": {"inner_lr": 1e-4},
    }


def _merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def config_from_dict(values: dict, preset: str = "desk") -> RunConfig:
    if not isinstance(values, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(values) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration section(s): {', '.join(unknown)}")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    merged = _merge(desk_defaults() if preset == "desk" else paper_defaults(), values)
    sections = {name: _build(_CLASSES[name], merged.get(name, {}), name) for name in _CLASSES}
    try:
        return RunConfig(**sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, preset: str = "desk") -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(values, preset)
