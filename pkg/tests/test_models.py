import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import gradient_error, random_point
from feddice.errors import ArchError, ShapeError
from feddice.models import (
    Arch, FNNModel, InputStats, LinearSVMModel, LRModel, ParamVector, TrainConfig, build_model,
    clone, from_params, load_checkpoint, predict_proba, save_checkpoint, train,
)
from feddice.netflow import Family, FeatureVector, Label


def test_lr_zero_weights_gives_half():
    m = LRModel(3)
    assert predict_proba(m, np.array([5.0, -2.0, 7.0])) == 0.5


def test_lr_closed_form():
    m = LRModel(2)
    m.w[...] = [1.0, -1.0]
    assert predict_proba(m, np.array([2.0, 1.0])) == pytest.approx(0.731059, abs=1e-6)


def test_predict_proba_on_feature_vector_uses_log_scale():
    m = LRModel(2)
    m.w[...] = [1.0, 0.0]
    fv = FeatureVector(np.array([np.e - 1, 0.0]), Label.CLEAN, Family.CLEAN, 10.0)
    assert predict_proba(m, fv) == pytest.approx(1 / (1 + np.exp(-1.0)))


def test_fnn_zero_hidden_weights_is_uniform():
    m = FNNModel(4, hidden=(3, 2))
    for blk in m.blocks:
        blk["W"][...] = 0.0
    m.out["W"][...] = np.eye(2)
    p = m.predict_proba(np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_allclose(p, 0.5)


def test_svm_flat_region_has_zero_gradient():
    m = LinearSVMModel(2, reg=0.0)
    m.w[...] = [2.0, 0.0]
    X = np.array([[1.0, 0.0], [-1.0, 3.0]])
    y = np.array([1, 0])
    loss, g = m.loss_and_grad(X, y)
    assert loss == 0.0
    assert np.all(g.values == 0.0)


@pytest.mark.parametrize("kind", ["lr", "svm", "fnn"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(42)
    for _ in range(5):
        model, X, y = random_point(kind, rng, dim=8)
        kw = {"reg": 0.1} if kind == "svm" else {}
        assert gradient_error(model, X, y, **kw) < 1e-4


def test_frozen_slots_get_no_gradient():
    model, X, y = random_point("fnn", np.random.default_rng(1))
    _, g = model.loss_and_grad(X, y, update_stats=False)
    assert np.all(g.values[~model.trainable_mask()] == 0)
    assert (~model.trainable_mask()).sum() == 2 * 10 + 2 * (6 + 5 + 4 + 4 + 3)


def test_shape_errors():
    m = LRModel(3)
    with pytest.raises(ShapeError):
        m.predict(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        m.loss_and_grad(np.zeros((2, 3)), np.zeros(3))


def test_zero_epochs_leave_parameters_unchanged():
    m = build_model("fnn", 6, seed=3, hidden=(5, 4))
    before = m.flat.copy()
    X = np.random.default_rng(0).normal(size=(20, 6))
    train(m, (X, np.arange(20) % 2), TrainConfig(epochs=0))
    np.testing.assert_array_equal(m.flat, before)


def _separable(rng, n=400, dim=5):
    y = rng.integers(0, 2, n)
    mu = np.where(y[:, None] == 1, 2.0, -2.0)
    return rng.normal(0, 0.7, (n, dim)) + mu, y


def _separable_oracle(X, y, epochs=200):
    """Perceptron: converges to zero errors iff the set is linearly separable."""
    w = np.zeros(X.shape[1] + 1)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    s = 2 * y - 1
    for _ in range(epochs):
        wrong = np.nonzero(s * (Xb @ w) <= 0)[0]
        if wrong.size == 0:
            return True
        w += s[wrong[0]] * Xb[wrong[0]]
    return False


def test_lr_learns_separable_gaussians():
    X, y = _separable(np.random.default_rng(0))
    assert _separable_oracle(X, y)
    m = LRModel(5)
    m.fit_input_stats(InputStats.from_inputs(X))
    train(m, (X, y), TrainConfig(learning_rate=0.1, epochs=10))
    assert np.mean(m.predict(X) == y) >= 0.99


@pytest.mark.parametrize("kind", ["lr", "svm", "fnn"])
def test_training_is_deterministic(kind):
    X, y = _separable(np.random.default_rng(1), n=120)
    runs = []
    for _ in range(2):
        m = build_model(kind, 5, seed=2, **({"hidden": (8, 4)} if kind == "fnn" else {}))
        train(m, (X, y), TrainConfig(epochs=3, batch_size=16, seed=9))
        runs.append(m.to_params().values)
    np.testing.assert_array_equal(runs[0], runs[1])


def test_split_training_replays_single_call():
    X, y = _separable(np.random.default_rng(2), n=100)
    a = build_model("fnn", 5, seed=1, hidden=(6, 3))
    b = clone(a)
    train(a, (X, y), TrainConfig(epochs=4, batch_size=10))
    for e in range(4):
        train(b, (X, y), TrainConfig(epochs=1, batch_size=10), epoch_offset=e)
    np.testing.assert_array_equal(a.flat, b.flat)


@pytest.mark.parametrize("kind", ["lr", "svm", "fnn"])
def test_param_round_trip(kind, tmp_path):
    m, X, _ = random_point(kind, np.random.default_rng(5))
    if kind == "fnn":
        m.predict_proba(X, train=True)
        m._forward(X, train=True, update_stats=True)
    back = from_params(m.arch, m.to_params())
    np.testing.assert_array_equal(back.flat, m.flat)
    save_checkpoint(m, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(loaded.flat, m.flat)
    assert loaded.arch_id == m.arch_id


def test_from_params_wrong_length_or_arch():
    m = LRModel(3)
    with pytest.raises(ArchError):
        from_params(m.arch, ParamVector(np.zeros(5), m.arch_id))
    with pytest.raises(ArchError):
        from_params(m.arch, ParamVector(np.zeros(len(m.flat)), "deadbeef"))
    with pytest.raises(ArchError):
        m.to_params() + LRModel(4).to_params()


def test_arch_id_depends_on_shape():
    assert Arch("fnn", 8, (4,)).arch_id != Arch("fnn", 8, (5,)).arch_id
    assert Arch("lr", 8).arch_id == Arch("lr", 8).arch_id


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), parts=st.lists(st.integers(1, 30), min_size=1,
                                                        max_size=6))
def test_input_stats_merge_equals_pooled(seed, parts):
    rng = np.random.default_rng(seed)
    chunks = [rng.normal(rng.normal(), rng.uniform(0.1, 3), (n, 3)) for n in parts]
    merged = InputStats.combine(InputStats.from_inputs(c) for c in chunks)
    pooled = InputStats.from_inputs(np.vstack(chunks))
    assert merged.n == pooled.n
    np.testing.assert_allclose(merged.mean, pooled.mean, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(merged.m2, pooled.m2, rtol=1e-8, atol=1e-8)


def test_constant_feature_keeps_unit_scale():
    X = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    mean, scale = InputStats.from_inputs(X).mean_scale()
    assert scale[0] == 1.0 and mean[0] == 3.0
