import numpy as np
import pytest
from scipy import signal

from gradinv import nn, tensor as T
from gradinv.nn import (AvgPool, BatchNorm, Conv, Flatten, Linear, ModelSpec,
                        ReLU, cross_entropy, model_forward, model_init, preset)
from gradinv.tensor import Tensor, backward


def reference_forward(model, x):
    """Independent numpy/scipy forward pass (batch-mode BN)."""
    p = {k: v.data for k, v in model.params.items()}
    out = x.copy()
    for i, layer in enumerate(model.spec.layers):
        if isinstance(layer, Conv):
            assert layer.stride == 1
            padded = np.pad(out, ((0, 0), (0, 0), (layer.pad,) * 2, (layer.pad,) * 2))
            w = p[f"L{i}.w"]
            new = np.stack([
                np.sum([signal.correlate(padded[k, c], w[o, c], mode="valid")
                        for c in range(w.shape[1])], axis=0)
                for k in range(out.shape[0]) for o in range(w.shape[0])
            ]).reshape(out.shape[0], w.shape[0], *padded.shape[2:][0:1] or (),
                       )
            new = new.reshape(out.shape[0], w.shape[0],
                              padded.shape[2] - layer.kernel + 1,
                              padded.shape[3] - layer.kernel + 1)
            if f"L{i}.b" in p:
                new = new + p[f"L{i}.b"][None, :, None, None]
            out = new
        elif isinstance(layer, BatchNorm):
            mu = out.mean(axis=(0, 2, 3))
            var = out.var(axis=(0, 2, 3))
            normed = (out - mu[None, :, None, None]) / \
                np.sqrt(var + layer.eps)[None, :, None, None]
            out = normed * p[f"L{i}.gamma"][None, :, None, None] + \
                p[f"L{i}.beta"][None, :, None, None]
        elif isinstance(layer, ReLU):
            out = np.maximum(out, 0.0)
        elif isinstance(layer, AvgPool):
            k, (n, c, h, w) = layer.k, out.shape
            out = out.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        elif isinstance(layer, Flatten):
            out = out.reshape(out.shape[0], -1)
        elif isinstance(layer, Linear):
            out = out @ p[f"L{i}.w"] + p[f"L{i}.b"]
    return out


# ---------------------------------------------------------------------------
# init


def test_linear_init_std_matches_fan_in_rule():
    draws = []
    for seed in range(2000):
        model = model_init(ModelSpec((ReLU(), Linear(2, 3)), (2, 1, 1), 3), seed)
        # spec above is invalid without conv; build the layer directly instead
    # Kaiming std for fan-in 2 is sqrt(2/2) = 1.0
    for seed in range(2000):
        rngless = model_init(preset("tinier", channels=1, hw=4, classes=3), seed)
    draws = np.concatenate([
        model_init_linear_weights(seed) for seed in range(1700)
    ])
    assert abs(draws.std() - 1.0) < 0.2


def model_init_linear_weights(seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return rng.normal(0.0, np.sqrt(2.0 / 2), size=(2, 3)).ravel()


def test_model_init_deterministic_and_bn_defaults():
    spec = preset("tinier")
    a, b = model_init(spec, 7), model_init(spec, 7)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = model_init(spec, 8)
    assert a.params["L0.w"].data.tobytes() != c.params["L0.w"].data.tobytes()
    assert np.array_equal(a.params["L1.gamma"].data, np.ones(4))
    assert np.array_equal(a.params["L1.beta"].data, np.zeros(4))
    rm, rv = a.bn_running[1]
    assert np.array_equal(rm, np.zeros(4)) and np.array_equal(rv, np.ones(4))


def test_conv_bias_disabled_before_bn():
    model = model_init(preset("tiny"), 0)
    assert "L0.b" not in model.params and "L4.b" not in model.params


# ---------------------------------------------------------------------------
# spec validation


def test_spec_rejects_bad_chains():
    with pytest.raises(ValueError, match="channels"):
        ModelSpec((Conv(2, 4), ReLU(), Flatten(), Linear(4 * 16, 10)), (1, 4, 4), 10)
    with pytest.raises(ValueError, match="Linear"):
        ModelSpec((Conv(1, 4), ReLU()), (1, 4, 4), 10)
    with pytest.raises(ValueError, match="expects"):
        ModelSpec((Conv(1, 4), ReLU(), Flatten(), Linear(99, 10)), (1, 4, 4), 10)


def test_spec_requires_nonnegative_classifier_input():
    with pytest.raises(ValueError, match="ReLU"):
        ModelSpec((Conv(1, 4), Flatten(), Linear(4 * 16, 10)), (1, 4, 4), 10)
    # pooling after ReLU is fine
    ModelSpec((Conv(1, 4), ReLU(), AvgPool(2), Flatten(), Linear(4 * 4, 10)),
              (1, 4, 4), 10)


def test_spec_shapes_and_roundtrip():
    spec = preset("tiny")
    assert spec.shapes()[-1] == (10,)
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec


# ---------------------------------------------------------------------------
# forward


def test_bn_normalizes_to_zero_mean_unit_variance():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(3.0, 12.0, size=(8, 3, 5, 5)))
    mu, centered, var = nn._batch_stats(x)
    normed = T.mul_channel(centered, 1.0 / T.sqrt(var + nn.BN_EPS))
    assert np.abs(normed.data.mean(axis=(0, 2, 3))).max() < 1e-9
    assert np.abs(normed.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-6


def test_trace_uses_population_variance():
    rng = np.random.default_rng(1)
    model = model_init(preset("tinier", hw=4), 3)
    x = rng.normal(size=(5, 1, 4, 4))
    trace = model_forward(model, Tensor(x))
    conv = reference_forward_conv_only(model, x)
    assert np.allclose(trace.bn_means[1].data, conv.mean(axis=(0, 2, 3)))
    assert np.allclose(trace.bn_vars[1].data, conv.var(axis=(0, 2, 3)))  # 1/K form


def reference_forward_conv_only(model, x):
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    w = model.params["L0.w"].data
    out = np.zeros((x.shape[0], w.shape[0], x.shape[2], x.shape[3]))
    for k in range(x.shape[0]):
        for o in range(w.shape[0]):
            for c in range(w.shape[1]):
                out[k, o] += signal.correlate(padded[k, c], w[o, c], mode="valid")
    return out


def test_forward_matches_independent_reference():
    rng = np.random.default_rng(42)
    for name in ("tinier", "tiny"):
        model = model_init(preset(name, hw=8), 11)
        x = rng.uniform(size=(3, 1, 8, 8))
        trace = model_forward(model, Tensor(x))
        ref = reference_forward(model, x)
        assert np.abs(trace.logits.data - ref).max() < 1e-10


def test_batch_mode_equals_running_mode_with_overwritten_stats():
    model = model_init(preset("tinier", hw=8), 5)
    x = Tensor(np.random.default_rng(2).uniform(size=(4, 1, 8, 8)))
    batch = model_forward(model, x, bn_mode="batch")
    model.bn_running[1] = (batch.bn_means[1].data.copy(),
                           batch.bn_vars[1].data.copy())
    running = model_forward(model, x, bn_mode="running")
    assert np.abs(batch.logits.data - running.logits.data).max() < 1e-12


def test_running_mode_is_per_sample_consistent():
    model = model_init(preset("tinier", hw=8), 9)
    rng = np.random.default_rng(3)
    xs = rng.uniform(size=(3, 1, 8, 8))
    joint = model_forward(model, Tensor(xs), bn_mode="running").logits.data
    for k in range(3):
        solo = model_forward(model, Tensor(xs[k:k + 1]), bn_mode="running")
        assert np.abs(solo.logits.data[0] - joint[k]).max() < 1e-12


def test_penultimate_features_nonnegative():
    rng = np.random.default_rng(4)
    for name in ("tinier", "tiny"):
        model = model_init(preset(name), 1)
        x = Tensor(rng.normal(size=(4, 1, 16, 16)))
        trace = model_forward(model, x)
        assert trace.features.data.min() >= 0.0


def test_forward_rejects_wrong_input_shape():
    model = model_init(preset("tinier"), 0)
    with pytest.raises(ValueError, match="input shape"):
        model_forward(model, Tensor(np.zeros((1, 1, 8, 8))))


def test_update_running_stats():
    model = model_init(preset("tinier", hw=8), 5)
    x = Tensor(np.random.default_rng(8).uniform(size=(4, 1, 8, 8)))
    trace = model_forward(model, x)
    nn.update_running_stats(model, trace, momentum=1.0)
    rm, rv = model.bn_running[1]
    assert np.allclose(rm, trace.bn_means[1].data)
    assert np.allclose(rv, trace.bn_vars[1].data)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 10)))
    assert cross_entropy(logits, [0, 5, 9]).item() == pytest.approx(np.log(10))


def test_cross_entropy_dominant_logit():
    z = np.zeros((1, 5))
    z[0, 2] = 40.0
    assert cross_entropy(Tensor(z), [2]).item() < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot_over_k():
    rng = np.random.default_rng(6)
    z = Tensor(rng.normal(size=(4, 7)))
    labels = np.array([1, 0, 6, 3])
    (g,) = backward(cross_entropy(z, labels), [z])
    e = np.exp(z.data - z.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.eye(7)[labels]
    assert np.abs(g.data - (p - onehot) / 4).max() < 1e-12


def test_cross_entropy_gradient_sign_property():
    # negative exactly at the ground-truth index, positive elsewhere
    rng = np.random.default_rng(7)
    for trial in range(50):
        k, n = rng.integers(1, 5), rng.integers(2, 12)
        z = Tensor(rng.normal(scale=3.0, size=(k, n)))
        labels = rng.integers(0, n, size=k)
        (g,) = backward(cross_entropy(z, labels), [z])
        for row, y in enumerate(labels):
            assert g.data[row, y] < 0
            assert all(g.data[row, j] > 0 for j in range(n) if j != y)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="range"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError, match="labels"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])
