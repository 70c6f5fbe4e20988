"""Finite-difference verification of every layer type and every loss."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import BatchNorm1d, Conv1d, Flatten, Linear, MaxPool1d, ReLU, ResidualBlock, Sequential, TemporalAttention
from .numerics import Tensor
from .ssl import SslConfig, instance_contrastive_loss, predictive_contrastive_loss

TOLERANCE = 1e-4
STEP = 1e-6
ZERO_FLOOR = 1e-6  # gradients with smaller norm on both sides are compared absolutely


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _layer_case(layer, x_shape, rng, train=False):
    """Loss = sum(layer(x) * R) for a fixed random R; checked w.r.t. x and all parameters."""
    x = _leaf(rng, *x_shape)
    out_shape = layer(x, train).shape
    r = rng.normal(size=out_shape)
    params = [x] + [p for _, p in layer.named_parameters()]

    def loss():
        # running statistics are side effects only; training-mode output depends on batch statistics
        return nx.tsum(layer(x, train) * r)

    return loss, params


def _cases(rng) -> dict:
    cases = {}
    cases["linear"] = _layer_case(Linear(5, 3, rng), (4, 5), rng)
    cases["conv1d_same"] = _layer_case(Conv1d(2, 3, 3, rng, "same"), (2, 2, 9), rng)
    cases["conv1d_valid"] = _layer_case(Conv1d(2, 3, 4, rng, "valid"), (2, 2, 9), rng)
    bn = BatchNorm1d(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)
    cases["batchnorm_train"] = _layer_case(bn, (4, 3, 5), rng, train=True)
    bn_eval = BatchNorm1d(3)
    bn_eval.running_mean[:] = rng.normal(size=3)
    bn_eval.running_var[:] = rng.uniform(0.5, 2.0, 3)
    cases["batchnorm_eval"] = _layer_case(bn_eval, (4, 3, 5), rng, train=False)
    cases["relu"] = _layer_case(ReLU(), (3, 7), rng)
    cases["maxpool1d"] = _layer_case(MaxPool1d(4, 4), (2, 3, 12), rng)
    cases["flatten"] = _layer_case(Flatten(), (2, 3, 4), rng)
    cases["attention"] = _layer_case(TemporalAttention(3, rng), (2, 3, 5), rng)
    cases["resblock"] = _layer_case(ResidualBlock(2, 3, 3, rng), (3, 2, 8), rng, train=True)

    predictor = Sequential([Linear(4, 5, rng), ReLU(), Linear(5, 4, rng)])
    z = _leaf(rng, 6, 4)
    hp = [p for _, p in predictor.named_parameters()]
    for mode in ("infonce", "paper-literal"):
        cfg = SslConfig(temperature=0.5, denominator=mode)
        cases[f"predictive_contrastive[{mode}]"] = (
            lambda cfg=cfg: predictive_contrastive_loss(z, predictor, cfg), [z] + hp)

    logits = _leaf(rng, 6, 4)
    labels = rng.integers(0, 4, size=6)
    cases["cross_entropy"] = (lambda: nx.cross_entropy(logits, labels), [logits])

    z1, z2 = _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    cfg = SslConfig(temperature=0.5)
    cases["nt_xent"] = (lambda: instance_contrastive_loss(z1, z2, cfg), [z1, z2])
    return cases


def check(name, loss_fn, params, h: float = STEP) -> CheckResult:
    analytic = nx.backward(loss_fn(), params)
    numeric = nx.finite_difference_gradient(lambda: float(loss_fn().data), params, h)
    err = max(nx.relative_error(a, n, floor=ZERO_FLOOR) for a, n in zip(analytic, numeric))
    return CheckResult(name, err, sum(p.data.size for p in params))


def run_gradcheck(seed: int = 0, fault: str | None = None) -> tuple[list[CheckResult], float]:
    """Check every case once; returns ``(results, seconds)``."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, params) in _cases(rng).items():
        if fault:
            with nx.inject_sign_fault(fault):
                results.append(check(name, fn, params))
        else:
            results.append(check(name, fn, params))
    return results, time.perf_counter() - start
