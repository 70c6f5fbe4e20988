"""Fixed-capacity replay memory with temperature-scaled entropy curation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import ModelBundle, logits as model_logits


@dataclass
class MenmConfig:
    temperature: float = 10.0
    capacity: int = 200
    rescore_existing: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("memory temperature must be positive")
        if self.capacity < 1:
            raise ConfigError("memory capacity must be positive")


@dataclass
class MemoryEntry:
    segment: np.ndarray
    label: int
    entropy: float
    step: int
    uid: int


@dataclass
class MemoryBuffer:
    capacity: int
    n_classes: int
    entries: list = field(default_factory=list)
    seen: int = 0  # candidates offered so far (reservoir policy)

    def __len__(self):
        return len(self.entries)

    @property
    def segments(self) -> np.ndarray:
        return np.stack([e.segment for e in self.entries]) if self.entries else np.zeros((0,))

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist() if self.entries else [0] * self.n_classes


def tempered_softmax(logits, temperature: float) -> np.ndarray:
    """softmax(logits / T) along the last axis, max-shifted."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prediction_entropy(probs) -> np.ndarray:
    """-sum p log p along the last axis with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ContractError("entropy requires a probability distribution")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def score_entropy(model: ModelBundle, segments, temperature: float) -> np.ndarray:
    """H(x; T) for each segment under ``model`` in evaluation mode."""
    if len(segments) == 0:
        return np.zeros(0)
    return prediction_entropy(tempered_softmax(model_logits(model, segments), temperature))


def class_quotas(capacity: int, n_classes: int, candidate_counts) -> np.ndarray:
    """floor(capacity/K) per class; the remainder goes to the classes with most candidates."""
    counts = np.asarray(candidate_counts)
    quota = np.full(n_classes, capacity // n_classes)
    extra = capacity % n_classes
    order = sorted(range(n_classes), key=lambda k: (-counts[k], k))
    for k in order[:extra]:
        quota[k] += 1
    return quota


def _dedupe(entries):
    out, seen = [], set()
    for e in entries:
        if e.uid not in seen:
            seen.add(e.uid)
            out.append(e)
    return out


def retain_lowest_entropy(pool, capacity: int, n_classes: int) -> list[MemoryEntry]:
    """Per class keep the lowest-entropy entries up to its quota (ties: newer first)."""
    counts = np.bincount([e.label for e in pool], minlength=n_classes) if pool else np.zeros(n_classes, int)
    quota = class_quotas(capacity, n_classes, counts)
    kept = []
    for k in range(n_classes):
        members = [e for e in pool if e.label == k]
        members.sort(key=lambda e: (e.entropy, -e.step, e.uid))
        kept.extend(members[:quota[k]])
    kept.sort(key=lambda e: (e.step, e.uid))
    return kept


def retain_random(pool, capacity: int, n_classes: int, rng: np.random.Generator) -> list[MemoryEntry]:
    """Same per-class quotas as entropy retention, members chosen uniformly at random."""
    counts = np.bincount([e.label for e in pool], minlength=n_classes) if pool else np.zeros(n_classes, int)
    quota = class_quotas(capacity, n_classes, counts)
    kept = []
    for k in range(n_classes):
        members = [e for e in pool if e.label == k]
        if len(members) > quota[k]:
            pick = rng.choice(len(members), size=quota[k], replace=False)
            members = [members[i] for i in sorted(pick)]
        kept.extend(members)
    kept.sort(key=lambda e: (e.step, e.uid))
    return kept


def enhance_memory(buffer: MemoryBuffer, candidates, model: ModelBundle, config: MenmConfig,
                   policy: str = "entropy", rng: np.random.Generator | None = None) -> MemoryBuffer:
    """Score candidates (and existing entries) with H(x; T) and retain per policy.

    ``policy``: "entropy" (lowest entropy per class quota), "random" (uniform
    within class quota) or "reservoir" (class-agnostic reservoir sampling).
    """
    held = {e.uid for e in buffer.entries}
    candidates = [c for c in candidates if c.uid not in held]
    for c in candidates:
        if not 0 <= c.label < buffer.n_classes:
            raise ContractError(f"pseudo-label {c.label} outside [0, {buffer.n_classes})")
    if candidates:
        h = score_entropy(model, np.stack([c.segment for c in candidates]), config.temperature)
        for c, v in zip(candidates, h):
            c.entropy = float(v)
    if config.rescore_existing and buffer.entries:
        h = score_entropy(model, buffer.segments, config.temperature)
        for e, v in zip(buffer.entries, h):
            e.entropy = float(v)
    if policy == "reservoir":
        rng = rng or np.random.default_rng(0)
        for c in candidates:
            buffer.seen += 1
            if len(buffer.entries) < buffer.capacity:
                buffer.entries.append(c)
            else:
                slot = int(rng.integers(buffer.seen))
                if slot < buffer.capacity:
                    buffer.entries[slot] = c
        return buffer
    pool = _dedupe(buffer.entries + candidates)
    buffer.seen += len(candidates)
    if policy == "entropy":
        buffer.entries = retain_lowest_entropy(pool, buffer.capacity, buffer.n_classes)
    elif policy == "random":
        buffer.entries = retain_random(pool, buffer.capacity, buffer.n_classes, rng or np.random.default_rng(0))
    else:
        raise ConfigError(f"unknown memory policy {policy!r}")
    return buffer


def store_direct(buffer: MemoryBuffer, entries) -> MemoryBuffer:
    """First-batch rule: place entries straight into an empty buffer (capacity still enforced)."""
    room = buffer.capacity - len(buffer.entries)
    buffer.entries.extend(list(entries)[:max(room, 0)])
    buffer.seen += len(entries)
    return buffer


def sample_replay_batch(buffer: MemoryBuffer, size: int, rng) -> list[MemoryEntry]:
    """Uniform sample without replacement of min(size, |buffer|) entries."""
    if size < 1:
        raise ContractError("replay batch size must be at least 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = min(size, len(buffer.entries))
    if n == 0:
        return []
    idx = rng.choice(len(buffer.entries), size=n, replace=False)
    return [buffer.entries[i] for i in idx]


def export_csv(buffer: MemoryBuffer, embeddings: np.ndarray, path) -> None:
    """Rows of (arrival_step, pseudo_label, entropy, embedding_0..embedding_{d-1})."""
    embeddings = np.asarray(embeddings)
    d = embeddings.shape[1] if embeddings.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival_step", "pseudo_label", "entropy"] + [f"embedding_{i}" for i in range(d)])
        for e, z in zip(buffer.entries, embeddings):
            w.writerow([e.step, e.label, repr(float(e.entropy))] + [repr(float(v)) for v in z])
