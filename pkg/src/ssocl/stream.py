"""Non-iid, class- and subject-incremental segment streams.

Learner-facing objects (``Stream``, ``StreamCursor``, ``Batch``) carry raw
segments only.  True labels and subject ids live in ``StreamMetadata`` and the
labelled evaluation sets, which only the evaluation code receives.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SEGMENT_MAGIC = b"SSEG"
SEGMENT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


@dataclass
class SyntheticConfig:
    n_subjects: int = 4
    n_classes: int = 4
    channels: int = 4
    length: int = 128
    segments_per_run: int = 12
    transition_width: int = 2
    noise_std: float = 0.1
    seed: int = 0
    sample_rate_hz: float = 64.0
    bands: list = field(default_factory=list)  # [[lo, hi], ...] in Hz; empty -> evenly spaced
    sines_per_channel: int = 3
    ar_coef: float = 0.5
    gain_range: list = field(default_factory=lambda: [0.7, 1.3])
    mixing: float = 1.0  # 0 -> identity mixing; larger -> closer to a uniformly random rotation
    band_shift: float = 0.0  # max per-subject frequency offset in Hz
    test_per_class: int = 10
    source_per_class: int = 40

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("synthetic stream needs at least two classes")
        if self.transition_width < 0 or self.transition_width >= max(self.segments_per_run, 1):
            raise ConfigError("transition width must be in [0, segments_per_run)")
        if self.n_subjects < 1 or self.segments_per_run < 1:
            raise ConfigError("need at least one subject and one segment per run")
        if not self.bands:
            self.bands = default_bands(self.n_classes, self.sample_rate_hz)
        bands = np.asarray(self.bands, dtype=float)
        if bands.shape != (self.n_classes, 2) or np.any(bands[:, 0] >= bands[:, 1]):
            raise ConfigError("bands must be one increasing [lo, hi] pair per class")
        order = np.argsort(bands[:, 0])
        lo, hi = bands[order, 0], bands[order, 1]
        if np.any(lo[1:] <= hi[:-1]):
            raise ConfigError("class frequency bands overlap")
        if hi.max() + self.band_shift >= self.sample_rate_hz / 2 or lo.min() - self.band_shift <= 0:
            raise ConfigError("bands must lie strictly inside (0, Nyquist)")


def default_bands(k: int, fs: float) -> list:
    """k disjoint bands of equal width with equal gaps across (2 Hz, 0.8 * Nyquist)."""
    lo, hi = 2.0, 0.8 * fs / 2
    width = (hi - lo) / (2 * k - 1)
    return [[lo + 2 * i * width, lo + (2 * i + 1) * width] for i in range(k)]


@dataclass
class Stream:
    segments: np.ndarray  # (N, C, L)

    def __len__(self):
        return len(self.segments)


@dataclass
class StreamMetadata:
    labels: np.ndarray
    subjects: np.ndarray

    def subject_order(self) -> list[int]:
        order = []
        for s in self.subjects.tolist():
            if not order or order[-1] != s:
                order.append(s)
        return order

    def last_index(self) -> dict:
        """Stream position of each subject's final segment."""
        return {int(s): int(np.nonzero(self.subjects == s)[0].max()) for s in np.unique(self.subjects)}


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray


@dataclass
class SyntheticData:
    stream: Stream
    metadata: StreamMetadata
    tests: dict  # subject id -> LabeledSet
    source: LabeledSet


@dataclass
class Subject:
    mixing: np.ndarray
    gain: float
    shift: float


def random_orthonormal(c: int, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    a = np.eye(c) + strength * rng.normal(size=(c, c))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))[None, :]


def mix(x: np.ndarray, subject: Subject) -> np.ndarray:
    """Channel mixing and gain; x has shape (..., C, L)."""
    return subject.gain * np.einsum("ij,...jl->...il", subject.mixing, x)


class _Generator:
    def __init__(self, config: SyntheticConfig, rng: np.random.Generator):
        self.cfg = config
        self.rng = rng
        self.t = np.arange(config.length) / config.sample_rate_hz

    def clean(self, label: int, shift: float = 0.0) -> np.ndarray:
        cfg = self.cfg
        lo, hi = cfg.bands[label]
        n = cfg.sines_per_channel
        freqs = self.rng.uniform(lo, hi, size=(cfg.channels, n)) + shift
        amps = self.rng.uniform(0.5, 1.5, size=(cfg.channels, n))
        phases = self.rng.uniform(0, 2 * np.pi, size=(cfg.channels, n))
        waves = amps[..., None] * np.sin(2 * np.pi * freqs[..., None] * self.t + phases[..., None])
        return waves.sum(axis=1)

    def noise(self) -> np.ndarray:
        cfg = self.cfg
        if cfg.noise_std == 0:
            return np.zeros((cfg.channels, cfg.length))
        a = cfg.ar_coef
        eps = self.rng.normal(size=(cfg.channels, cfg.length)) * cfg.noise_std
        out = np.empty_like(eps)
        out[:, 0] = eps[:, 0]
        scale = np.sqrt(1 - a * a)
        for i in range(1, cfg.length):
            out[:, i] = a * out[:, i - 1] + scale * eps[:, i]
        return out

    def segment(self, label: int, subject: Subject) -> np.ndarray:
        return mix(self.clean(label, subject.shift), subject) + self.noise()

    def blended(self, prev: int, cur: int, w_prev: float, subject: Subject) -> np.ndarray:
        clean = w_prev * self.clean(prev, subject.shift) + (1 - w_prev) * self.clean(cur, subject.shift)
        return mix(clean, subject) + self.noise()

    def subject(self) -> Subject:
        cfg = self.cfg
        return Subject(random_orthonormal(cfg.channels, self.rng, cfg.mixing),
                       float(self.rng.uniform(*cfg.gain_range)),
                       float(self.rng.uniform(-cfg.band_shift, cfg.band_shift)))

    def iid_set(self, subject: Subject, per_class: int) -> LabeledSet:
        labels = np.repeat(np.arange(self.cfg.n_classes), per_class)
        x = np.stack([self.segment(int(k), subject) for k in labels]) if len(labels) else np.zeros((0,))
        return LabeledSet(_as_f32(x), labels)


def _as_f32(x: np.ndarray) -> np.ndarray:
    # round through float32 so in-memory runs match runs from SSEG files
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def crossfade_weights(width: int) -> np.ndarray:
    """Weight of the previous class at positions 0..width-1 of a new run."""
    return np.array([(width - i) / (width + 1) for i in range(width)])


def generate_synthetic(config: SyntheticConfig) -> SyntheticData:
    rng = np.random.default_rng(config.seed)
    gen = _Generator(config, rng)
    source_subject = gen.subject()
    source = gen.iid_set(source_subject, config.source_per_class)
    segments, labels, subjects, tests = [], [], [], {}
    fade = crossfade_weights(config.transition_width)
    for s in range(config.n_subjects):
        subj = gen.subject()
        order = rng.permutation(config.n_classes)
        for r, cls in enumerate(order):
            for i in range(config.segments_per_run):
                if r > 0 and i < config.transition_width:
                    prev = int(order[r - 1])
                    w = fade[i]
                    segments.append(gen.blended(prev, int(cls), w, subj))
                    labels.append(prev if w > 0.5 else int(cls))
                else:
                    segments.append(gen.segment(int(cls), subj))
                    labels.append(int(cls))
                subjects.append(s)
        tests[s] = gen.iid_set(subj, config.test_per_class)
    stream = Stream(_as_f32(np.stack(segments)))
    meta = StreamMetadata(np.array(labels), np.array(subjects))
    return SyntheticData(stream, meta, tests, source)


# ---------------------------------------------------------------- cursor

@dataclass
class Batch:
    indices: np.ndarray
    x: np.ndarray

    def __len__(self):
        return len(self.indices)


class EndOfStream(Exception):
    pass


class StreamCursor:
    """Single-consumer, single-pass reader; counts how often each segment is yielded."""

    def __init__(self, stream: Stream):
        self.stream = stream
        self.position = 0
        self.consumed = np.zeros(len(stream), dtype=int)
        self.dropped: list[int] = []

    def next_batch(self, size: int) -> Batch:
        n = len(self.stream)
        if self.position >= n:
            raise EndOfStream
        stop = min(self.position + size, n)
        idx = np.arange(self.position, stop)
        self.position = stop
        if len(idx) < 2:
            self.dropped.extend(idx.tolist())
            log.info("dropping %d-segment tail of the stream", len(idx))
            raise EndOfStream
        self.consumed[idx] += 1
        return Batch(idx, self.stream.segments[idx])

    def batches(self, size: int):
        while True:
            try:
                yield self.next_batch(size)
            except EndOfStream:
                return


# ---------------------------------------------------------------- SSEG files

@dataclass
class SegmentDataset:
    x: np.ndarray
    labels: np.ndarray | None = None
    subjects: np.ndarray | None = None
    sample_rate_hz: float | None = None
    path: str = ""

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"{self.path or 'dataset'} has no label sidecar; it cannot be used for evaluation")
        return self.labels


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_segments(path, x, labels=None, subjects=None, sample_rate_hz=None) -> None:
    x = np.asarray(x)
    if x.ndim != 3:
        raise DataError("segments must have shape (N, C, L)")
    n, c, length = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SEGMENT_MAGIC, SEGMENT_VERSION, c, length, n))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    meta = {}
    if labels is not None:
        meta["labels"] = [int(v) for v in labels]
    if subjects is not None:
        meta["subjects"] = [int(v) for v in subjects]
    if sample_rate_hz is not None:
        meta["sample_rate_hz"] = float(sample_rate_hz)
    if meta:
        sidecar_path(path).write_text(json.dumps(meta))


def load_segments(path) -> SegmentDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"segment file {path} not found")
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise DataError(f"{path} is truncated")
    magic, version, c, length, n = _HEADER.unpack_from(buf)
    if magic != SEGMENT_MAGIC:
        raise DataError(f"{path} is not a segment file")
    if version != SEGMENT_VERSION:
        raise DataError(f"{path} has unsupported version {version}")
    need = _HEADER.size + 4 * n * c * length
    if len(buf) < need:
        raise DataError(f"{path} is truncated: expected {need} bytes, found {len(buf)}")
    if len(buf) > need:
        raise DataError(f"{path} has {len(buf) - need} trailing bytes")
    x = np.frombuffer(buf, dtype="<f4", count=n * c * length, offset=_HEADER.size).reshape(n, c, length)
    ds = SegmentDataset(x.astype(np.float64), path=str(path))
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{side} is not valid JSON") from exc
        for key in ("labels", "subjects"):
            if key in meta:
                arr = np.asarray(meta[key], dtype=int)
                if len(arr) != n:
                    raise DataError(f"{side}: {key} has {len(arr)} entries for {n} segments")
                setattr(ds, key, arr)
        ds.sample_rate_hz = meta.get("sample_rate_hz")
    return ds
