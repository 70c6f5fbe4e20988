"""Network F = (feature extractor f, linear classifier phi) plus predictor head h."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError
from .layers import Layer, Linear, ReLU, Sequential, build_layer
from .numerics import Tensor

CHECKPOINT_MAGIC = b"SSOC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    channels: int = 4
    length: int = 128
    preset: str = "desk"
    embed_dim: int = 32
    n_classes: int = 4
    attention: bool = False
    predictor_hidden: int = 0  # 0 means "same as embed_dim"
    layers: list = field(default_factory=list)  # used when preset == "custom"

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.channels < 1 or self.length < 1:
            raise ConfigError("channels and length must be positive")
        if self.preset not in ("desk", "paper", "custom"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.preset == "custom" and not self.layers:
            raise ConfigError("custom preset needs a layer list")


def preset_layers(config: ModelConfig) -> list[dict]:
    if config.preset == "custom":
        return list(config.layers)
    if config.preset == "desk":
        specs = [{"type": "conv1d", "filters": 8, "kernel": 7}, {"type": "relu"},
                 {"type": "maxpool", "kernel": 4, "stride": 4}]
        if config.attention:
            specs.append({"type": "attention"})
        specs += [{"type": "flatten"}, {"type": "linear", "units": 64}, {"type": "relu"}]
    else:
        specs = [{"type": "conv1d", "filters": 32, "kernel": 15}, {"type": "batchnorm"}, {"type": "relu"},
                 {"type": "resblock", "filters": 32, "kernel": 15},
                 {"type": "resblock", "filters": 64, "kernel": 21},
                 {"type": "resblock", "filters": 64, "kernel": 43}]
        if config.attention:
            specs.append({"type": "attention"})
        specs += [{"type": "flatten"}]
        for units in (1024, 512, 256):
            specs += [{"type": "linear", "units": units}, {"type": "relu"}]
    # projection head to the embedding dimension
    specs.append({"type": "linear", "units": config.embed_dim})
    return specs


@dataclass
class ModelBundle:
    config: ModelConfig
    features: Sequential
    classifier: Linear
    predictor: Sequential

    def feature_parameters(self) -> list[Tensor]:
        return [p for _, p in self.features.named_parameters()]

    def classifier_parameters(self) -> list[Tensor]:
        return [p for _, p in self.classifier.named_parameters()]

    def predictor_parameters(self) -> list[Tensor]:
        return [p for _, p in self.predictor.named_parameters()]

    def named_parameters(self):
        return (self.features.named_parameters("f.") + self.classifier.named_parameters("phi.")
                + self.predictor.named_parameters("h."))

    def named_buffers(self):
        return self.features.named_buffers("f.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def init_model(config: ModelConfig, seed: int = 0) -> ModelBundle:
    """Deterministic fan-in scaled uniform initialisation."""
    rng = np.random.default_rng(seed)
    shape: tuple = (config.channels, config.length)
    layers: list[Layer] = []
    for spec in preset_layers(config):
        layer, shape = build_layer(spec, rng, shape)
        layers.append(layer)
    if shape != (config.embed_dim,):
        raise ConfigError(f"feature extractor ends in shape {shape}, expected ({config.embed_dim},)")
    d = config.embed_dim
    hidden = config.predictor_hidden or d
    classifier = Linear(d, config.n_classes, rng)
    predictor = Sequential([Linear(d, hidden, rng), ReLU(), Linear(hidden, d, rng)])
    return ModelBundle(config, Sequential(layers), classifier, predictor)


def _check_batch(config: ModelConfig, x) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (config.channels, config.length):
        raise DataError(f"expected batch of shape (B, {config.channels}, {config.length}), got {x.shape}")
    return x


def forward_features(bundle: ModelBundle, x, train: bool = False) -> Tensor:
    """Embeddings z = f(x), shape (B, d)."""
    return bundle.features(_check_batch(bundle.config, x), train)


def forward_logits(bundle: ModelBundle, x, train: bool = False) -> Tensor:
    return bundle.classifier(forward_features(bundle, x, train), train)


def predict_next(bundle: ModelBundle, z) -> Tensor:
    z = nx.as_tensor(z)
    squeeze = z.ndim == 1
    if squeeze:
        z = nx.reshape(z, (1, -1))
    out = bundle.predictor(z)
    return nx.reshape(out, (-1,)) if squeeze else out


def embed(bundle: ModelBundle, x, chunk: int = 256) -> np.ndarray:
    """Evaluation-mode embeddings as a plain array."""
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros((0, bundle.config.embed_dim))
    return np.concatenate([forward_features(bundle, x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def logits(bundle: ModelBundle, x, chunk: int = 256) -> np.ndarray:
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros((0, bundle.config.n_classes))
    return np.concatenate([forward_logits(bundle, x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def clone_model(bundle: ModelBundle) -> ModelBundle:
    return copy.deepcopy(bundle)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write magic, version, JSON config echo, then named float64 arrays (little-endian)."""
    cfg = json.dumps(asdict(bundle.config), sort_keys=True).encode()
    arrays = [(n, p.data) for n, p in bundle.named_parameters()] + list(bundle.named_buffers())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a model checkpoint")
    try:
        version, ncfg = struct.unpack_from("<HI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos = 10
        config = ModelConfig(**json.loads(buf[pos:pos + ncfg]))
        pos += ncfg
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(buf):
                raise DataError(f"{path} is truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise DataError(f"{path} is truncated") from exc
    bundle = init_model(config, 0)
    for name, p in bundle.named_parameters():
        p.data[...] = arrays[name]
    for name, b in bundle.named_buffers():
        b[...] = arrays[name]
    return bundle
