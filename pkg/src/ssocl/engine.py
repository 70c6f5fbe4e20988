"""Bi-level online loop: inner pseudo-labelling, meta-training on batch + replay, memory curation.

``Learner`` is the only object that touches the model and memory, and it only
ever sees raw segments.  ``run_stream`` drives it over a stream and does the
bookkeeping that needs true labels (accuracy on held-out test sets).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .clustering import ClusteringError, KMeansConfig, compute_centroids, kmeans
from .config import MEMORY_POLICY, RunConfig
from .errors import ContractError, DataError, MappingError
from .mapping import cosine_distance_matrix, hungarian, match_clusters, match_partial, merge_with_memory
from .memory import MemoryBuffer, MemoryEntry, enhance_memory, sample_replay_batch, score_entropy, store_direct
from .model import ModelBundle, ModelConfig, embed, forward_logits, init_model, logits
from .numerics import Adam
from .ssl import inner_adapt
from .stream import Batch, LabeledSet, Stream, StreamCursor, StreamMetadata

log = logging.getLogger(__name__)

_TAGS = {"inner": 1, "kmeans": 2, "meta": 3, "memory": 4}


def _rng(seed: int, t: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, t, _TAGS[tag]])


def _seed(seed: int, t: int, tag: str) -> int:
    return int(_rng(seed, t, tag).integers(2**31))


def _normalize(z: np.ndarray) -> np.ndarray:
    return z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)


def accuracy(model: ModelBundle, data: LabeledSet) -> float:
    if len(data.y) == 0:
        return 0.0
    return float(np.mean(logits(model, data.x).argmax(axis=1) == data.y))


def pretrain_source(config: ModelConfig, source: LabeledSet, epochs: int, seed: int = 0,
                    lr: float = 1e-3, batch_size: int = 32, weight_decay: float = 1e-4):
    """Supervised cross-entropy training on labelled source data.

    Returns ``(bundle, train_accuracy)``.
    """
    y = np.asarray(source.y, dtype=int)
    if len(y) and (y.min() < 0 or y.max() >= config.n_classes):
        raise DataError(f"source labels must lie in [0, {config.n_classes})")
    bundle = init_model(config, seed)
    params = bundle.feature_parameters() + bundle.classifier_parameters()
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 0])
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            opt.minimize(nx.cross_entropy(forward_logits(bundle, source.x[idx], train=True), y[idx]))
    return bundle, accuracy(bundle, LabeledSet(source.x, y))


@dataclass
class CombinedSet:
    """D = D^t (first ``n_batch`` rows) followed by D^m.

    ``batch_labels`` is aligned with the incoming batch; -1 marks samples left
    unlabelled (dropped from D^t).
    """

    x: np.ndarray
    y: np.ndarray
    n_batch: int
    batch_labels: np.ndarray | None
    info: dict = field(default_factory=dict)


class Learner:
    """Stream state: time step, meta-model F, replay memory M."""

    def __init__(self, model: ModelBundle, config: RunConfig):
        self.model = model
        self.cfg = config
        self.k = config.model.n_classes
        self.t = 0
        self.memory = MemoryBuffer(config.menm.capacity, self.k)
        tc = config.train
        self.variant = tc.variant
        self.policy = MEMORY_POLICY[tc.variant]
        self.objective = "instance" if tc.variant == "no_ssm" else "predictive"
        self.meta_params = model.feature_parameters() + model.classifier_parameters()
        self.optimizer = Adam(self.meta_params, lr=tc.meta_lr, weight_decay=tc.weight_decay,
                              decoupled=tc.decoupled_weight_decay)

    # ------------------------------------------------------------ inner loop

    def _cluster(self, z: np.ndarray, t: int):
        kc = self.cfg.kmeans
        return kmeans(z, KMeansConfig(k=kc.k, max_iter=kc.max_iter, tol=kc.tol, restarts=kc.restarts,
                                      seed=_seed(kc.seed + self.cfg.train.seed, t, "kmeans")))

    def _name_first_clusters(self, x: np.ndarray, clusters: np.ndarray) -> np.ndarray:
        """Name each cluster after the majority of F's predictions on its members.

        "classifier" allows several clusters to share a name; "classifier_bijective"
        forces a one-to-one naming.
        """
        pred = logits(self.model, x).argmax(axis=1)
        agree = np.zeros((self.k, self.k))
        np.add.at(agree, (clusters, pred), 1.0)
        if self.cfg.train.first_batch == "classifier_bijective":
            cols = hungarian(-agree)
        else:
            cols = agree.argmax(axis=1)
        return cols[clusters]

    def _name_novel_clusters(self, x, clusters, loose, present_m) -> dict:
        """Unmatched clusters whose majority prediction under F is a class absent from memory take that class."""
        pred = logits(self.model, x).argmax(axis=1)
        out = {}
        for c in loose:
            votes = np.bincount(pred[clusters == c], minlength=self.k)
            name = int(votes.argmax())
            if not present_m[name]:
                out[c] = name
        return out

    def process_batch(self, batch: Batch) -> CombinedSet:
        """Inner objective: adapt a copy, cluster, map clusters to memory labels, merge."""
        cfg, t = self.cfg, self.t
        x = batch.x
        info = {}
        adapted, before, after = inner_adapt(self.model, x, cfg.ssl, _seed(cfg.train.seed, t, "inner"),
                                             objective=self.objective, share_predictor=cfg.train.share_predictor)
        info["inner_loss_before"], info["inner_loss_after"] = before, after
        z = embed(adapted, x)
        if cfg.ssl.normalize:
            z = _normalize(z)

        if len(self.memory) == 0:
            try:
                clusters = self._cluster(z, t).labels
            except ClusteringError:
                clusters = logits(self.model, x).argmax(axis=1)
                info["event"] = "too_few_samples_for_kmeans"
            if cfg.train.first_batch != "cluster_ids":
                clusters = self._name_first_clusters(x, clusters)
            labels = clusters.astype(int)
            entropy = score_entropy(self.model, x, cfg.menm.temperature)
            store_direct(self.memory, [MemoryEntry(x[i], int(labels[i]), float(entropy[i]), t, int(batch.indices[i]))
                                       for i in range(len(x))])
            info["direct_store"] = True
            return CombinedSet(x, labels, len(x), labels, info)

        mem_x, mem_y = self.memory.segments, self.memory.labels
        mem_net = adapted if cfg.train.memory_embedding == "adapted" else self.model
        zm = embed(mem_net, mem_x)
        if cfg.ssl.normalize:
            zm = _normalize(zm)
        cm, present_m = compute_centroids(zm, mem_y, self.k)
        labels = None
        try:
            try:
                clusters = self._cluster(z, t).labels
                ct, present_t = compute_centroids(z, clusters, self.k)
                dist = cosine_distance_matrix(ct, cm, present_t, present_m)
                rows = np.nonzero(present_t)[0]
                if present_m.all():
                    mapping = match_clusters(dist, rows=rows, method=cfg.train.mapping)
                else:
                    mapping = match_partial(dist, rows, np.nonzero(present_m)[0])
                info["mapping_cost"] = mapping.cost
                limit = np.inf if cfg.train.max_match_distance is None else cfg.train.max_match_distance
                names = {c: m for c, m in mapping.assignment.items() if dist[c, m] <= limit}
                loose = [int(c) for c in rows if int(c) not in names]
                if loose and cfg.train.novel_clusters == "classifier":
                    names.update(self._name_novel_clusters(x, clusters, loose, present_m))
                labels = np.array([names.get(int(c), -1) for c in clusters], dtype=int)
                if loose:
                    info["unlabelled"] = int((labels < 0).sum())
            except ClusteringError:
                # fewer samples than clusters: nearest memory centroid per sample
                dist = cosine_distance_matrix(z, cm, None, present_m)
                labels = dist.argmin(axis=1)
                info["event"] = "nearest_memory_centroid"
                log.info("t=%d: batch smaller than K, labelled by nearest memory centroid", t)
        except MappingError as exc:
            info["event"] = f"mapping_failed: {exc}"
            log.warning("t=%d: cluster mapping failed (%s); training on memory only", t, exc)
            labels = None
        if labels is None:
            return CombinedSet(mem_x, mem_y, 0, None, info)
        kept = labels >= 0
        dx, dy = merge_with_memory(x[kept], labels[kept], mem_x, mem_y)
        return CombinedSet(dx, dy, int(kept.sum()), labels, info)

    # ------------------------------------------------------------ meta loop

    def meta_train(self, data: CombinedSet) -> float:
        """``meta_steps`` Adam steps on current-batch samples plus a replay draw."""
        if len(data.y) == 0:
            raise ContractError("meta-training needs a non-empty combined set")
        tc = self.cfg.train
        rng = _rng(tc.seed, self.t, "meta")
        cur_x, cur_y = data.x[:data.n_batch], data.y[:data.n_batch]
        losses = []
        for _ in range(tc.meta_steps):
            if len(cur_y) > tc.current_batch:
                pick = rng.choice(len(cur_y), tc.current_batch, replace=False)
                bx, by = cur_x[pick], cur_y[pick]
            else:
                bx, by = cur_x, cur_y
            replay = sample_replay_batch(self.memory, tc.replay_batch, rng) if len(self.memory) else []
            if replay:
                rx = np.stack([e.segment for e in replay])
                ry = np.array([e.label for e in replay], dtype=int)
                bx = np.concatenate([bx, rx]) if len(bx) else rx
                by = np.concatenate([by, ry]) if len(by) else ry
            if len(by) < 2:
                continue
            loss = nx.cross_entropy(forward_logits(self.model, bx, train=True), by)
            losses.append(self.optimizer.minimize(loss))
        return float(np.mean(losses)) if losses else float("nan")

    def enhance(self, batch: Batch, data: CombinedSet) -> None:
        if data.batch_labels is None or data.info.get("direct_store"):
            candidates = []
        else:
            candidates = [MemoryEntry(batch.x[i], int(data.batch_labels[i]), 0.0, self.t, int(batch.indices[i]))
                          for i in range(len(batch)) if data.batch_labels[i] >= 0]
        enhance_memory(self.memory, candidates, self.model, self.cfg.menm, policy=self.policy,
                       rng=_rng(self.cfg.train.seed, self.t, "memory"))

    def step(self, batch: Batch) -> dict:
        data = self.process_batch(batch)
        if self.cfg.train.enhance_first:
            self.enhance(batch, data)
            meta_loss = self.meta_train(data)
        else:
            meta_loss = self.meta_train(data)
            self.enhance(batch, data)
        if len(self.memory) > self.memory.capacity:
            raise AssertionError("memory capacity exceeded")
        record = {"t": self.t, "batch_size": len(batch), "combined_size": len(data.y),
                  "inner_loss_before": data.info.get("inner_loss_before"),
                  "inner_loss_after": data.info.get("inner_loss_after"),
                  "meta_loss": meta_loss, "buffer_size": len(self.memory),
                  "class_counts": self.memory.class_counts(), "memory_policy": self.policy}
        if "event" in data.info:
            record["event"] = data.info["event"]
        self.last_labels = data.batch_labels
        self.t += 1
        return record


# ---------------------------------------------------------------- evaluation

@dataclass
class MetricsLog:
    subjects: list = field(default_factory=list)
    adaptation: list = field(default_factory=list)  # a_j
    retention: list = field(default_factory=list)  # m_j, j < |S|
    final: list = field(default_factory=list)  # per-subject accuracy of the final model
    gen_acc: float | None = None
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"subjects": self.subjects, "adaptation": self.adaptation, "retention": self.retention,
                "final": self.final, "gen_acc": self.gen_acc}


def compute_metrics(log_: MetricsLog) -> dict:
    """AdapAcc = mean a_j; GenAcc on the union of test sets; ForAcc = mean(m_j - a_j)."""
    n = len(log_.subjects)
    if n == 0 or len(log_.adaptation) != n or len(log_.retention) != max(n - 1, 0) or log_.gen_acc is None:
        raise ContractError("metrics log is incomplete")
    a = np.asarray(log_.adaptation, dtype=float)
    m = np.asarray(log_.retention, dtype=float)
    forgetting = float(np.mean(m - a[:-1])) if n > 1 else 0.0
    return {"AdapAcc": float(a.mean()), "GenAcc": float(log_.gen_acc), "ForAcc": forgetting,
            "ForAcc_convention": "mean(m_j - a_j); negative means forgetting"}


def run_stream(model: ModelBundle, config: RunConfig, stream: Stream, metadata: StreamMetadata,
               tests: dict, on_step=None):
    """Drive a ``Learner`` over ``stream`` once; returns ``(MetricsLog, learner, cursor)``."""
    learner = Learner(model, config)
    cursor = StreamCursor(stream)
    order = metadata.subject_order()
    last = metadata.last_index()
    log_ = MetricsLog(subjects=order)
    done = 0

    def close_subjects(upto: int):
        nonlocal done
        while done < len(order) and last[order[done]] <= upto:
            j = order[done]
            log_.adaptation.append(accuracy(learner.model, tests[j]))
            if done > 0 and config.train.retention == "next_subject":
                log_.retention.append(accuracy(learner.model, tests[order[done - 1]]))
            done += 1

    for batch in cursor.batches(config.train.batch_size):
        record = learner.step(batch)
        if learner.last_labels is not None:
            lab = learner.last_labels
            ok = lab >= 0
            if ok.any():
                record["pseudo_label_agreement"] = float(np.mean(lab[ok] == metadata.labels[batch.indices][ok]))
        log_.steps.append(record)
        if on_step:
            on_step(record)
        close_subjects(int(batch.indices.max()))
    close_subjects(len(stream))
    log_.final = [accuracy(learner.model, tests[j]) for j in order]
    if config.train.retention == "end":
        log_.retention = log_.final[:-1]
    union = LabeledSet(np.concatenate([tests[j].x for j in order]), np.concatenate([tests[j].y for j in order]))
    log_.gen_acc = accuracy(learner.model, union)
    return log_, learner, cursor
