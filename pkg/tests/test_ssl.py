import numpy as np
import pytest

from ssocl import numerics as nx
from ssocl.errors import ContractError
from ssocl.model import ModelConfig, embed, init_model
from ssocl.numerics import Tensor
from ssocl.ssl import SslConfig, inner_adapt, instance_contrastive_loss, jitter_views, predictive_contrastive_loss

identity = lambda z: z


def test_identical_embeddings_give_log_b():
    z = Tensor(np.ones((32, 8)))
    loss = predictive_contrastive_loss(z, identity, SslConfig(temperature=0.5, denominator="infonce"))
    assert float(loss.data) == pytest.approx(np.log(32), abs=1e-12)


def test_paper_literal_identical_embeddings():
    # denominator sums over all B predictions, numerator is one of them
    z = Tensor(np.ones((16, 4)))
    loss = predictive_contrastive_loss(z, identity, SslConfig(denominator="paper-literal"))
    assert float(loss.data) == pytest.approx(np.log(16), abs=1e-12)


def test_two_samples_strong_positive_approaches_zero():
    z = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    predictor = lambda v: v * -1.0  # p_0 = z_1, p_1 = z_0
    loss = predictive_contrastive_loss(z, predictor, SslConfig(temperature=0.01))
    assert 0.0 <= float(loss.data) < 1e-6


def test_single_embedding_rejected():
    with pytest.raises(ContractError):
        predictive_contrastive_loss(Tensor(np.ones((1, 3))), identity, SslConfig())


def explicit_predictive_loss(z, w, tau, mode):
    p = z @ w
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    pn = p / np.linalg.norm(p, axis=1, keepdims=True)
    b = len(z)
    total = 0.0
    for n in range(b - 1):
        pos = np.exp(pn[n] @ zn[n + 1] / tau)
        if mode == "infonce":
            den = pos + sum(np.exp(pn[n] @ pn[j] / tau) for j in range(b) if j != n)
        else:
            den = sum(np.exp(pn[n] @ pn[j] / tau) for j in range(b))
        total += -np.log(pos / den)
    return total / (b - 1)


@pytest.mark.parametrize("mode", ["infonce", "paper-literal"])
def test_loss_matches_explicit_sum(mode):
    rng = np.random.default_rng(0)
    z, w = rng.normal(size=(8, 16)), rng.normal(size=(16, 16))
    got = predictive_contrastive_loss(Tensor(z), lambda v: v @ Tensor(w), SslConfig(temperature=0.5, denominator=mode))
    assert float(got.data) == pytest.approx(explicit_predictive_loss(z, w, 0.5, mode), rel=1e-12)


@pytest.mark.parametrize("mode", ["infonce", "paper-literal"])
def test_loss_gradient_b8_d16(mode):
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(8, 16)), requires_grad=True)
    w = Tensor(rng.normal(size=(16, 16)) * 0.2, requires_grad=True)
    cfg = SslConfig(denominator=mode)
    loss = lambda: predictive_contrastive_loss(z, lambda v: v @ w, cfg)
    analytic = nx.backward(loss(), [z, w])
    numeric = nx.finite_difference_gradient(lambda: float(loss().data), [z, w], 1e-6)
    assert max(nx.relative_error(a, n) for a, n in zip(analytic, numeric)) <= 1e-4


def test_loss_invariant_to_embedding_scale():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 5))
    cfg = SslConfig()
    a = predictive_contrastive_loss(Tensor(z), identity, cfg).data
    b = predictive_contrastive_loss(Tensor(3.0 * z), identity, cfg).data
    assert a == pytest.approx(b, rel=1e-12)


def test_nt_xent_matches_explicit_sum():
    rng = np.random.default_rng(3)
    z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    z = np.concatenate([z1, z2])
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    s = z @ z.T / 0.5
    ref = 0.0
    for i in range(8):
        j = (i + 4) % 8
        ref += -np.log(np.exp(s[i, j]) / sum(np.exp(s[i, k]) for k in range(8) if k != i))
    got = instance_contrastive_loss(Tensor(z1), Tensor(z2), SslConfig(temperature=0.5))
    assert float(got.data) == pytest.approx(ref / 8, rel=1e-12)


def test_jitter_views_scale():
    x = np.random.default_rng(0).normal(size=(3, 2, 500)) * 4.0
    v1, v2 = jitter_views(x, 0.05, np.random.default_rng(1))
    assert np.std(v1 - x) == pytest.approx(0.05 * 4.0, rel=0.1)
    assert not np.array_equal(v1, v2)


def test_inner_adapt_zero_steps_is_identity():
    bundle = init_model(ModelConfig(), 0)
    x = np.random.default_rng(0).normal(size=(8, 4, 128))
    adapted, before, after = inner_adapt(bundle, x, SslConfig(inner_steps=0), seed=0)
    assert before is None and after is None
    np.testing.assert_array_equal(embed(adapted, x), embed(bundle, x))


def test_inner_adapt_leaves_original_untouched():
    bundle = init_model(ModelConfig(), 0)
    snapshot = [p.data.copy() for p in bundle.parameters()]
    x = np.random.default_rng(0).normal(size=(8, 4, 128))
    inner_adapt(bundle, x, SslConfig(inner_steps=3, inner_lr=1e-2), seed=0)
    assert all(np.array_equal(a, p.data) for a, p in zip(snapshot, bundle.parameters()))


def test_inner_adapt_usually_reduces_loss():
    wins = 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        bundle = init_model(ModelConfig(), trial)
        x = rng.normal(size=(8, 4, 128)) + np.sin(np.arange(128) * rng.uniform(0.1, 1.0))
        _, before, after = inner_adapt(bundle, x, SslConfig(inner_steps=5, inner_lr=1e-3), seed=trial)
        wins += after <= before
    assert wins >= 45
