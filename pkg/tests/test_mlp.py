import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from conftest import eq1_model, make_model
from exaware.data import Dataset
from exaware.defense import DefenseConfig, similarity_penalty
from exaware.mlp import (Architecture, ArchitectureError, MLPModel, TrainingConfig,
                         TrainingDivergedError, accuracy, composite_loss_and_grads, forward,
                         forward_hidden_states, init_model, mse_loss_and_grads, train)


def loop_forward(model, x):
    """Scalar-loop evaluator used as an independent reference."""
    h = list(map(float, x))
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        nxt = []
        for r in range(W.shape[0]):
            s = float(b[r])
            for c in range(W.shape[1]):
                s += float(W[r, c]) * h[c]
            nxt.append(s if k == last else max(0.0, s))
        h = nxt
    return np.array(h)


# --- architecture and init -------------------------------------------------

@pytest.mark.parametrize("sizes", [(3,), (3, 1), (3, 0, 1), (0, 2, 1)])
def test_architecture_rejects_invalid(sizes):
    with pytest.raises(ArchitectureError):
        Architecture(sizes)


def test_init_deterministic():
    a = init_model(Architecture((2, 2, 1)), 42)
    b = init_model(Architecture((2, 2, 1)), 42)
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(x, y)


def test_init_differs_across_seeds():
    a = init_model(Architecture((4, 3, 1)), 1)
    b = init_model(Architecture((4, 3, 1)), 2)
    assert not np.array_equal(a.weights[0], b.weights[0])


def test_mnist_784_8x2_1_shapes():
    m = init_model(Architecture((784, 8, 8, 1)), 42)
    assert [w.shape for w in m.weights] == [(8, 784), (8, 8), (1, 8)]
    assert m.n_weights() == 6344
    assert m.n_parameters() == 6344 + 17


def test_3221_shapes():
    m = init_model(Architecture((3, 2, 2, 1)), 10)
    assert [w.shape for w in m.weights] == [(2, 3), (2, 2), (1, 2)]


def test_model_rejects_bad_shapes_and_nonfinite():
    with pytest.raises(ArchitectureError):
        make_model([np.ones((2, 3)), np.ones((1, 3))])
    with pytest.raises(ValueError):
        make_model([[[np.nan, 1.0]], [[1.0]]])


# --- forward --------------------------------------------------------------

def test_forward_examples():
    m = make_model([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0]]])
    assert forward(m, [2.0, 3.0])[0] == 5.0
    assert forward(m, [-2.0, -3.0])[0] == 0.0
    assert forward(eq1_model(), [1.0, 1.0])[0] == 7.0
    assert loop_forward(eq1_model(), [1.0, 1.0])[0] == 7.0


def test_forward_dimension_mismatch():
    with pytest.raises(ArchitectureError):
        forward(eq1_model(), [1.0, 2.0, 3.0])


def test_forward_batch_matches_rows():
    m = init_model(Architecture((5, 4, 3, 2)), 3)
    X = np.random.default_rng(0).normal(size=(7, 5))
    out = forward(m, X)
    for i in range(7):
        assert np.allclose(out[i], loop_forward(m, X[i]), rtol=1e-13, atol=1e-13)


def test_hidden_states_examples():
    pre, act = forward_hidden_states(eq1_model(), [1.0, 1.0])
    assert pre[0].tolist() == [3.0, 2.0]
    assert act[0].tolist() == [True, True]
    m = make_model([[[1.0, -1.0], [0.0, 1.0]], [[1.0, 1.0]]])
    assert forward_hidden_states(m, [1.0, 1.0])[0][0][0] == 0.0
    pre, _ = forward_hidden_states(eq1_model(), [0.0, 0.0])
    assert np.all(pre[0] == 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.01, 100.0))
def test_homogeneity_zero_bias(seed, alpha):
    m = init_model(Architecture((4, 5, 3, 1)), seed)
    x = np.random.default_rng(seed).normal(size=4)
    assert np.allclose(forward(m, alpha * x), alpha * forward(m, x), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_piecewise_linearity(seed):
    rng = np.random.default_rng(seed)
    m = init_model(Architecture((3, 4, 3, 1)), seed)
    m.biases = [rng.normal(size=b.shape) for b in m.biases]
    u, v = rng.normal(size=3), rng.normal(size=3)
    # shrink the segment until the activation pattern is constant at both ends and the midpoint
    for _ in range(60):
        pats = [np.concatenate(forward_hidden_states(m, u + t * (v - u))[1]) for t in (0, 0.5, 1)]
        if all(np.array_equal(pats[0], p) for p in pats[1:]):
            break
        v = u + 0.5 * (v - u)
    ts = np.linspace(0, 1, 7)
    f = np.array([forward(m, u + t * (v - u))[0] for t in ts])
    affine = f[0] + ts * (f[-1] - f[0])
    assert np.all(np.abs(f - affine) <= 1e-10 * (1 + np.abs(f)))


# --- gradients ------------------------------------------------------------

def _fd_check(model, X, Y, penalty=None, weight=0.0, h=1e-6, rtol=1e-5):
    _, gw, gb = composite_loss_and_grads(model, X, Y, penalty, weight)
    for grads, params in ((gw, model.weights), (gb, model.biases)):
        for g, p in zip(grads, params):
            num = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = p[i]
                p[i] = old + h
                lp = composite_loss_and_grads(model, X, Y, penalty, weight)[0]
                p[i] = old - h
                lm = composite_loss_and_grads(model, X, Y, penalty, weight)[0]
                p[i] = old
                num[i] = (lp - lm) / (2 * h)
            scale = max(np.max(np.abs(num)), np.max(np.abs(g)), 1e-8)
            assert np.max(np.abs(num - g)) / scale < rtol


@pytest.mark.parametrize("seed", range(5))
def test_mse_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = init_model(Architecture((3, 4, 3, 2)), seed)
    m.biases = [rng.normal(scale=0.3, size=b.shape) for b in m.biases]
    X, Y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    _fd_check(m, X, Y)


@pytest.mark.parametrize("scope,biases", [("first-layer", False), ("all-layers", True)])
def test_composite_gradient_matches_finite_differences(scope, biases):
    rng = np.random.default_rng(7)
    m = init_model(Architecture((3, 4, 3, 1)), 7)
    m.biases = [rng.normal(scale=0.3, size=b.shape) for b in m.biases]
    X, Y = rng.normal(size=(5, 3)), rng.normal(size=(5, 1))
    cfg = DefenseConfig(lambda_similarity=0.3, layer_scope=scope, include_biases=biases)
    _fd_check(m, X, Y, similarity_penalty(m, cfg), 0.3)


def test_mse_loss_value():
    m = make_model([[[1.0, 0.0]], [[2.0]]], [np.array([0.0]), np.array([1.0])])
    loss, _, _ = mse_loss_and_grads(m, np.array([[1.0, 5.0], [-1.0, 0.0]]), np.array([[3.0], [0.0]]))
    # outputs 3 and 1 -> errors 0 and 1
    assert loss == 0.5


# --- training -------------------------------------------------------------

def toy_two_class(seed=42, n=100):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, 2))
    w = np.array([1.0, -1.0])
    margin = X @ w
    keep = np.abs(margin) > 0.05
    X, labels = X[keep], (margin[keep] > 0).astype(int)
    return Dataset(X, labels.astype(float), "toy", (0.0, 1.0), labels, 2)


def logistic_baseline(ds):
    X = np.hstack([ds.inputs, np.ones((len(ds), 1))])
    y = ds.labels

    def nll(w):
        z = X @ w
        return np.sum(np.logaddexp(0, z) - y * z)

    w = minimize(nll, np.zeros(3), method="BFGS").x
    return float(np.mean((X @ w > 0) == y))


def test_toy_training_reaches_high_accuracy():
    ds = toy_two_class()
    m = train(Architecture((2, 8, 1)), ds, TrainingConfig(epochs=300, batch_size=16,
                                                          learning_rate=1e-2, seed=42))
    acc = accuracy(m, ds)
    ref = logistic_baseline(ds)
    assert ref >= 0.95
    assert acc >= 0.95
    assert acc >= ref - 0.05


def test_training_deterministic():
    ds = toy_two_class()
    cfg = TrainingConfig(epochs=5, batch_size=16, seed=3,
                         defense=DefenseConfig(lambda_similarity=0.1))
    a = train(Architecture((2, 4, 1)), ds, cfg)
    b = train(Architecture((2, 4, 1)), ds, cfg)
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(x, y)
    assert a.metadata["lambda_similarity"] == 0.1
    assert a.metadata["training"]["defense"]["lambda_similarity"] == 0.1


def test_training_errors():
    ds = toy_two_class()
    with pytest.raises(ValueError):
        train(Architecture((2, 4, 1)), ds.subset(np.arange(0)), TrainingConfig())
    with pytest.raises(ArchitectureError):
        train(Architecture((3, 4, 1)), ds, TrainingConfig())
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)


def test_training_divergence_reports_position():
    ds = Dataset(np.full((8, 2), 1.0), np.full(8, 1e200), "huge", (0.0, 1.0))
    with pytest.raises(TrainingDivergedError) as ei:
        train(Architecture((2, 2, 1)), ds, TrainingConfig(epochs=2, batch_size=4))
    assert ei.value.epoch == 0 and ei.value.batch == 0


def test_accuracy_examples():
    labels = np.array([0, 1] * 10)
    ds = Dataset(np.zeros((20, 1)), labels.astype(float), "bal", (0.0, 1.0), labels, 2)
    perfect = Dataset(np.c_[labels.astype(float)], labels.astype(float), "id", (0.0, 1.0), labels, 2)
    ident = make_model([[[1.0]], [[1.0]]])
    assert accuracy(ident, perfect) == 1.0
    const = make_model([[[0.0]], [[0.0]]])
    assert accuracy(const, ds) == 0.5
    with pytest.raises(ValueError):
        accuracy(ident, ds.subset(np.arange(0)))


# --- serialization --------------------------------------------------------

def test_model_json_round_trip(tmp_path):
    m = init_model(Architecture((5, 3, 2, 1)), 9)
    m.biases = [np.random.default_rng(1).normal(size=b.shape) for b in m.biases]
    p = tmp_path / "m.json"
    m.save(p)
    d = json.loads(p.read_text())
    assert d["version"] == "1" and d["architecture"] == [5, 3, 2, 1]
    back = MLPModel.load(p)
    for x, y in zip(m.weights + m.biases, back.weights + back.biases):
        assert np.array_equal(x, y)


def test_model_json_rejects_unknown_version():
    d = init_model(Architecture((2, 2, 1)), 0).to_dict()
    d["version"] = "2"
    with pytest.raises(ValueError):
        MLPModel.from_dict(d)


def test_float32_export_rounds():
    m = init_model(Architecture((3, 2, 1)), 0)
    f = m.to_float32()
    assert np.array_equal(f.weights[0], m.weights[0].astype(np.float32).astype(np.float64))
