import numpy as np
import pytest

from ssocl import numerics as nx
from ssocl.errors import ConfigError, ContractError, DataError
from ssocl.model import (ModelConfig, clone_model, embed, forward_features, forward_logits, init_model,
                         load_checkpoint, predict_next, save_checkpoint)


@pytest.fixture
def bundle():
    return init_model(ModelConfig(), seed=3)


def batch(n, seed=0, c=4, length=128):
    return np.random.default_rng(seed).normal(size=(n, c, length))


def test_init_deterministic():
    a, b = init_model(ModelConfig(), 5), init_model(ModelConfig(), 5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_desk_shapes(bundle):
    assert forward_features(bundle, batch(3)).shape == (3, 32)
    assert forward_logits(bundle, batch(3)).shape == (3, 4)


def test_single_sample_gives_one_vector(bundle):
    assert forward_features(bundle, batch(1)).shape == (1, 32)


def test_duplicated_rows_give_duplicated_embeddings(bundle):
    x = batch(2)
    z = embed(bundle, np.concatenate([x, x]))
    np.testing.assert_array_equal(z[:2], z[2:])


def test_paper_preset_embedding_dim():
    cfg = ModelConfig(channels=32, length=128, preset="paper", embed_dim=128, attention=True)
    assert embed(init_model(cfg, 0), batch(2, c=32)).shape == (2, 128)


def test_wrong_input_shape_is_data_error(bundle):
    with pytest.raises(DataError):
        forward_features(bundle, batch(2, c=3))


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=0)
    with pytest.raises(ConfigError):
        ModelConfig(n_classes=1)


def test_zero_classifier_gives_uniform(bundle):
    for p in bundle.classifier_parameters():
        p.data[...] = 0.0
    out = forward_logits(bundle, batch(4)).data
    assert np.all(out == 0.0)
    np.testing.assert_allclose(nx.softmax(nx.Tensor(out)).data, 0.25)


def test_mean_embedding_gradient(bundle):
    x = batch(3)
    params = bundle.feature_parameters()[-2:]  # projection layer keeps the check fast
    loss = lambda: nx.mean(forward_features(bundle, x))
    analytic = nx.backward(loss(), params)
    numeric = nx.finite_difference_gradient(lambda: float(loss().data), params, 1e-6)
    for a, n in zip(analytic, numeric):
        assert nx.relative_error(a, n) <= 1e-4


def test_clone_independent(bundle):
    x = batch(2)
    copy = clone_model(bundle)
    np.testing.assert_array_equal(embed(copy, x), embed(bundle, x))
    assert np.array_equal(embed(clone_model(copy), x), embed(bundle, x))
    before = bundle.feature_parameters()[0].data.copy()
    copy.feature_parameters()[0].data += 1.0
    assert np.array_equal(bundle.feature_parameters()[0].data, before)


def test_predictor_identity_and_zero(bundle):
    d = bundle.config.embed_dim
    for p in bundle.predictor_parameters():
        p.data[...] = np.eye(d) if p.ndim == 2 else 0.0
    z = np.abs(np.random.default_rng(0).normal(size=d))  # hidden ReLU passes non-negative inputs
    np.testing.assert_allclose(predict_next(bundle, z).data, z)
    for p in bundle.predictor_parameters():
        p.data[...] = 0.0
    assert np.all(predict_next(bundle, z).data == 0.0)
    with pytest.raises(ContractError):
        predict_next(bundle, np.ones(d + 1))


def test_predictor_gradient(bundle):
    z = np.random.default_rng(1).normal(size=(3, bundle.config.embed_dim))
    params = bundle.predictor_parameters()
    loss = lambda: nx.tsum(predict_next(bundle, z) ** 2)
    analytic = nx.backward(loss(), params)
    numeric = nx.finite_difference_gradient(lambda: float(loss().data), params, 1e-6)
    for a, n in zip(analytic, numeric):
        assert nx.relative_error(a, n) <= 1e-4


def test_checkpoint_round_trip(bundle, tmp_path):
    forward_logits(bundle, batch(4), train=True)
    save_checkpoint(bundle, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    x = batch(3, seed=9)
    np.testing.assert_array_equal(embed(back, x), embed(bundle, x))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.ckpt")
