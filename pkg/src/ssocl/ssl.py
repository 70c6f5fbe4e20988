"""Self-supervised fast adaptation: future-embedding prediction with a contrastive loss.

For a batch of consecutive segments with embeddings z_0..z_{B-1}, the predictor
produces p_n = h(z_n), a guess of z_{n+1}.  Each anchor n < B-1 scores its
positive pair p_n . z_{n+1} against the other predictions p_j, j != n.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .model import ModelBundle, clone_model, forward_features
from .numerics import Adam, Tensor


@dataclass
class SslConfig:
    temperature: float = 0.5
    inner_steps: int = 5
    inner_lr: float = 1e-4
    normalize: bool = True
    denominator: str = "infonce"  # or "paper-literal"
    jitter: float = 0.05  # instance-discrimination views only (no_ssm ablation)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("SSL temperature must be positive")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be non-negative")
        if self.denominator not in ("infonce", "paper-literal"):
            raise ConfigError(f"unknown denominator mode {self.denominator!r}")


def predictive_contrastive_loss(z: Tensor, predictor, config: SslConfig) -> Tensor:
    """Mean over anchors of -log(exp(p_n.z_{n+1}/tau) / D_n)."""
    z = nx.as_tensor(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError("predictive contrastive loss needs at least two embeddings")
    p = predictor(z)
    if config.normalize:
        z, p = nx.l2_normalize(z), nx.l2_normalize(p)
    n = z.shape[0]
    tau = config.temperature
    anchors = p[:-1]  # p_n predicts z_{n+1}
    pos = nx.tsum(anchors * z[1:], axis=1) * (1.0 / tau)  # (B-1,)
    sims = (anchors @ p.T) * (1.0 / tau)  # (B-1, B): p_n . p_j
    if config.denominator == "infonce":
        # drop the self-similarity column j == n, the positive takes its place
        keep = ~np.eye(n - 1, n, dtype=bool)
        negatives = nx.reshape(sims[keep], (n - 1, n - 1))
        denom = nx.logsumexp(nx.concat([nx.reshape(pos, (-1, 1)), negatives], axis=1), axis=1)
    else:
        denom = nx.logsumexp(sims, axis=1)
    return nx.mean(denom - pos)


def instance_contrastive_loss(z1: Tensor, z2: Tensor, config: SslConfig) -> Tensor:
    """NT-Xent over two views: row i of z1 and z2 are positives, all else negatives."""
    z = nx.concat([z1, z2], axis=0)
    if config.normalize:
        z = nx.l2_normalize(z)
    m = z.shape[0]
    half = m // 2
    sims = (z @ z.T) * (1.0 / config.temperature)
    keep = ~np.eye(m, dtype=bool)
    others = nx.reshape(sims[keep], (m, m - 1))
    partner = np.concatenate([np.arange(half, m), np.arange(half)])
    pos = sims[np.arange(m), partner]
    return nx.mean(nx.logsumexp(others, axis=1) - pos)


def jitter_views(x: np.ndarray, scale: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two additive-Gaussian views with sigma = scale * per-segment signal std."""
    std = x.std(axis=(1, 2), keepdims=True)
    return (x + rng.normal(size=x.shape) * scale * std,
            x + rng.normal(size=x.shape) * scale * std)


def inner_adapt(bundle: ModelBundle, batch, config: SslConfig, seed: int = 0,
                objective: str = "predictive", share_predictor: bool = False):
    """Adapt a copy of the feature extractor (and the predictor) to ``batch``.

    Returns ``(adapted, loss_before, loss_after)``.  ``bundle`` is never
    modified unless ``share_predictor`` is set, in which case the adapted
    predictor weights are written back into ``bundle.predictor``.
    """
    batch = np.asarray(batch)
    if len(batch) < 2:
        raise ContractError("inner adaptation needs a batch of at least two segments")
    adapted = clone_model(bundle)
    rng = np.random.default_rng(seed)

    def loss_fn():
        if objective == "predictive":
            return predictive_contrastive_loss(forward_features(adapted, batch, train=True), adapted.predictor, config)
        if objective == "instance":
            v1, v2 = jitter_views(batch, config.jitter, rng)
            return instance_contrastive_loss(forward_features(adapted, v1, train=True),
                                             forward_features(adapted, v2, train=True), config)
        raise ConfigError(f"unknown inner objective {objective!r}")

    params = adapted.feature_parameters()
    if objective == "predictive":
        params = params + adapted.predictor_parameters()
    opt = Adam(params, lr=config.inner_lr, weight_decay=0.0)
    before = after = None
    for _ in range(config.inner_steps):
        loss = loss_fn()
        if before is None:
            before = float(loss.data)
        opt.step(nx.backward(loss, params))
    if config.inner_steps:
        after = float(loss_fn().data)
    if share_predictor and objective == "predictive":
        for dst, src in zip(bundle.predictor_parameters(), adapted.predictor_parameters()):
            dst.data[...] = src.data
    return adapted, before, after
