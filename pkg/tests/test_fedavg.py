import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckksfed import fedavg as fa
from ckksfed.errors import DivergenceError, LayoutMismatchError, LevelExhaustedError
from ckksfed.modelpack import decrypt_model, encrypt_model, flatten, unflatten


def test_weights_normalize():
    w = fa.AggregationWeights.from_sizes([100, 300])
    assert w.normalized == (0.25, 0.75)
    assert w.total == 400
    with pytest.raises(ValueError):
        fa.AggregationWeights(())
    with pytest.raises(ValueError):
        fa.AggregationWeights((1.0, 0.0))


def test_trainer_spec_defaults_and_validation():
    spec = fa.TrainerSpec()
    assert (spec.epochs, spec.learning_rate, spec.batch_size) == (4, 5e-5, 1)
    with pytest.raises(ValueError):
        fa.TrainerSpec(epochs=0)
    with pytest.raises(ValueError):
        fa.TrainerSpec(batch_size=0)


def test_aggregate_plain_examples():
    m = lambda v: {"w": np.array([v])}
    assert fa.aggregate_plain([m(1.0), m(3.0)], fa.AggregationWeights.from_sizes([100, 100]))["w"][0] == 2.0
    assert fa.aggregate_plain([m(1.0), m(3.0)], fa.AggregationWeights.from_sizes([100, 300]))["w"][0] == 2.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=8))
def test_identical_models_are_a_fixed_point(sizes):
    model = {"w": np.array([0.1, -2.5, 3.0])}
    out = fa.aggregate_plain([model] * len(sizes), fa.AggregationWeights.from_sizes(sizes))
    assert np.allclose(out["w"], model["w"], rtol=1e-15, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=8), st.integers(0, 2**31))
def test_aggregate_is_a_convex_combination(sizes, seed):
    rng = np.random.default_rng(seed)
    models = [{"w": rng.normal(size=5)} for _ in sizes]
    out = fa.aggregate_plain(models, fa.AggregationWeights.from_sizes(sizes))["w"]
    stack = np.stack([m["w"] for m in models])
    assert np.all(out <= stack.max(axis=0) + 1e-12)
    assert np.all(out >= stack.min(axis=0) - 1e-12)
    expected = (np.array(sizes, dtype=float) @ stack) / sum(sizes)
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_aggregate_plain_structure_checks():
    with pytest.raises(LayoutMismatchError):
        fa.aggregate_plain([{"a": np.zeros(2)}, {"b": np.zeros(2)}], fa.AggregationWeights((1.0, 1.0)))
    with pytest.raises(LayoutMismatchError):
        fa.aggregate_plain([{"a": np.zeros(2)}, {"a": np.zeros(3)}], fa.AggregationWeights((1.0, 1.0)))
    with pytest.raises(ValueError):
        fa.aggregate_plain([{"a": np.zeros(2)}], fa.AggregationWeights((1.0, 1.0)))


def one_param_model(w):
    return {"dense0/kernel": np.array([[w]]), "dense0/bias": np.array([0.0])}


def test_single_sgd_step_hand_computed():
    model = one_param_model(0.0)
    out = fa.local_sgd(model, np.array([[1.0]]), np.array([2.0]), fa.TrainerSpec(1, 0.1, 1),
                       np.random.default_rng(0))
    # w <- w - eta * (w x - y) x = 0 + 0.1 * 2
    assert out["dense0/kernel"][0, 0] == pytest.approx(0.2, abs=1e-15)
    assert out["dense0/bias"][0] == pytest.approx(0.2, abs=1e-15)


def test_zero_learning_rate_leaves_model_unchanged(rng):
    model = fa.init_mlp((4, 8, 1), rng)
    X, y = rng.normal(size=(20, 4)), rng.normal(size=20)
    out = fa.local_sgd(model, X, y, fa.TrainerSpec(2, 0.0, 3), rng)
    for k in model:
        assert np.array_equal(out[k], model[k])


def test_gradient_matches_finite_differences(rng):
    model = fa.init_mlp((5, 7, 1), rng)
    X, y = rng.normal(size=(6, 5)), rng.normal(size=6)
    _, grad = fa.mlp_loss_grad(model, X, y)
    layout, flat = flatten(model)
    h = 1e-6
    numeric = np.empty_like(flat)
    for i in range(len(flat)):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (fa.mlp_loss_grad(unflatten(layout, up), X, y)[0]
                      - fa.mlp_loss_grad(unflatten(layout, down), X, y)[0]) / (2 * h)
    mask = np.abs(numeric) > 1e-4
    rel = np.abs(grad[mask] - numeric[mask]) / np.abs(numeric[mask])
    assert rel.max() < 1e-5
    assert np.allclose(grad[~mask], numeric[~mask], atol=1e-8)


def test_predict_matches_manual_forward(rng):
    model = fa.init_mlp((3, 4, 2, 1), rng)
    X = rng.normal(size=(5, 3))
    h = np.maximum(X @ model["dense0/kernel"] + model["dense0/bias"], 0)
    h = np.maximum(h @ model["dense1/kernel"] + model["dense1/bias"], 0)
    expected = (h @ model["dense2/kernel"] + model["dense2/bias"])[:, 0]
    assert np.allclose(fa.mlp_predict(model, X), expected)


def test_sgd_reduces_loss(rng):
    X = rng.normal(size=(200, 4))
    y = X @ np.array([1.0, -2.0, 0.5, 0.0]) + 3.0
    model = fa.init_mlp((4, 16, 1), rng)
    before = fa.mlp_loss_grad(model, X, y)[0]
    after_model = fa.local_sgd(model, X, y, fa.TrainerSpec(5, 1e-2, 4), rng)
    assert fa.mlp_loss_grad(after_model, X, y)[0] < 0.2 * before


def test_divergence_detected(rng):
    X = rng.normal(size=(50, 4)) * 1e3
    y = rng.normal(size=50) * 1e3
    with pytest.raises(DivergenceError):
        fa.local_sgd(fa.init_mlp((4, 8, 1), rng), X, y, fa.TrainerSpec(20, 10.0, 1), rng)


def test_aggregate_encrypted_matches_plain(params, keys, rng):
    sizes = rng.integers(100, 2000, size=8)
    models = [{"w": rng.uniform(-1, 1, 10_000)} for _ in sizes]
    weights = fa.AggregationWeights.from_sizes(sizes)
    packed = [encrypt_model(m, keys.public_key, params, rng) for m in models]
    agg = fa.aggregate_encrypted(packed, weights, params)
    assert agg.level == params.top_level - 1
    assert agg.scale == params.scale
    got = decrypt_model(agg, keys.secret_key)["w"]
    assert np.max(np.abs(got - fa.aggregate_plain(models, weights)["w"])) < 1e-6


def test_aggregate_encrypted_single_learner_identity(params, keys, rng):
    model = {"w": rng.uniform(-10, 10, 500)}
    packed = encrypt_model(model, keys.public_key, params, rng)
    agg = fa.aggregate_encrypted([packed], fa.AggregationWeights((7.0,)), params)
    assert np.max(np.abs(decrypt_model(agg, keys.secret_key)["w"] - model["w"])) < 2**-25


def test_aggregate_encrypted_symmetric_pair(params, keys, rng):
    packed = [encrypt_model({"w": np.array([v])}, keys.public_key, params, rng) for v in (1.0, 3.0)]
    agg = fa.aggregate_encrypted(packed, fa.AggregationWeights.from_sizes([100, 100]), params)
    assert decrypt_model(agg, keys.secret_key)["w"][0] == pytest.approx(2.0, abs=2**-25)


def test_aggregate_encrypted_level_budget(params, keys, rng):
    packed = encrypt_model({"w": np.ones(4)}, keys.public_key, params, rng)
    w = fa.AggregationWeights((1.0,))
    once = fa.aggregate_encrypted([packed], w, params)
    twice = fa.aggregate_encrypted([once], w, params)
    assert twice.level == 0
    with pytest.raises(LevelExhaustedError):
        fa.aggregate_encrypted([twice], w, params)


def test_aggregate_encrypted_layout_mismatch(params, keys, rng):
    a = encrypt_model({"w": np.ones(4)}, keys.public_key, params, rng)
    b = encrypt_model({"v": np.ones(4)}, keys.public_key, params, rng)
    with pytest.raises(LayoutMismatchError):
        fa.aggregate_encrypted([a, b], fa.AggregationWeights((1.0, 1.0)), params)
