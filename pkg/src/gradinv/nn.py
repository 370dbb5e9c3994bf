"""Layer definitions, model construction, and the classification loss.

Batch normalization is the interesting part: in ``batch`` mode the layer
normalizes by the current batch's per-channel mean and population variance,
and those statistics stay on the graph, so gradients flow through them
exactly as in training-mode backprop. The per-layer statistics are captured
on the forward trace because the attack regularizes against them.
"""

from dataclasses import dataclass, field

import numpy as np

from gradinv import tensor as T
from gradinv.tensor import Tensor

BN_EPS = 1e-5


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class BatchNorm:
    ch: int
    eps: float = BN_EPS


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    k: int = 2


@dataclass(frozen=True)
class MaxPool:
    k: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


_LAYER_KINDS = {cls.__name__: cls for cls in
                (Conv, BatchNorm, ReLU, AvgPool, MaxPool, Flatten, Linear)}


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus input shape (C, H, W) and class count."""

    layers: tuple
    input_shape: tuple
    classes: int

    def __post_init__(self):
        self.validate()

    def validate(self):
        shape = tuple(self.input_shape)
        if len(shape) != 3 or any(d <= 0 for d in shape):
            raise ValueError(f"bad input shape {shape}")
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ValueError("model must end with a Linear classifier")
        for i, layer in enumerate(self.layers):
            shape = _layer_out_shape(layer, shape, i)
        if shape != (self.classes,):
            raise ValueError(
                f"final Linear produces {shape}, expected ({self.classes},)")
        self._check_nonneg_features()

    def _check_nonneg_features(self):
        # The label-restoration sign rule needs non-negative inputs to the
        # classifier, i.e. a ReLU (possibly followed by pooling) ahead of it.
        seen_relu = False
        for layer in self.layers[:-1]:
            if isinstance(layer, ReLU):
                seen_relu = True
            elif isinstance(layer, (AvgPool, MaxPool, Flatten)):
                continue
            else:
                seen_relu = False
        if not seen_relu:
            raise ValueError(
                "layer feeding the classifier must be ReLU or pooling after ReLU")

    def shapes(self):
        """Per-layer output shapes, starting from the input shape."""
        out, shape = [], tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _layer_out_shape(layer, shape, i)
            out.append(shape)
        return out

    def to_dict(self):
        return {
            "layers": [{"kind": type(l).__name__,
                        **{k: getattr(l, k) for k in l.__dataclass_fields__}}
                       for l in self.layers],
            "input_shape": list(self.input_shape),
            "classes": self.classes,
        }

    @staticmethod
    def from_dict(d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            cls = _LAYER_KINDS[entry.pop("kind")]
            layers.append(cls(**entry))
        return ModelSpec(tuple(layers), tuple(d["input_shape"]), d["classes"])


def _layer_out_shape(layer, shape, i):
    def fail(msg):
        raise ValueError(f"layer {i} ({type(layer).__name__}): {msg}, input {shape}")

    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            fail(f"expects {layer.in_ch} channels")
        c, h, w = shape
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho <= 0 or wo <= 0:
            fail("kernel larger than padded input")
        return (layer.out_ch, ho, wo)
    if isinstance(layer, BatchNorm):
        if len(shape) != 3 or shape[0] != layer.ch:
            fail(f"expects {layer.ch} channels")
        return shape
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, (AvgPool, MaxPool)):
        if len(shape) != 3 or shape[1] % layer.k or shape[2] % layer.k:
            fail(f"spatial dims must divide by {layer.k}")
        return (shape[0], shape[1] // layer.k, shape[2] // layer.k)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Linear):
        if shape != (layer.in_features,):
            fail(f"expects ({layer.in_features},)")
        return (layer.out_features,)
    fail("unknown layer kind")


def preset(name, channels=1, hw=16, classes=10):
    """Named reference architectures: `tiny` (two conv blocks) and `tinier`
    (one conv block, for oracle-scale tests)."""
    c, h = channels, hw
    if name == "tinier":
        layers = (
            Conv(c, 4), BatchNorm(4), ReLU(), AvgPool(2), Flatten(),
            Linear(4 * (h // 2) * (h // 2), classes),
        )
    elif name == "tiny":
        layers = (
            Conv(c, 8), BatchNorm(8), ReLU(), AvgPool(2),
            Conv(8, 16), BatchNorm(16), ReLU(), AvgPool(2), Flatten(),
            Linear(16 * (h // 4) * (h // 4), classes),
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    return ModelSpec(layers, (c, h, h), classes)


@dataclass
class Model:
    spec: ModelSpec
    params: dict                      # name -> Tensor (graph leaves)
    bn_running: dict = field(default_factory=dict)  # layer idx -> (mean, var)

    def param_names(self):
        return list(self.params)

    def fc_weight_name(self):
        return f"L{len(self.spec.layers) - 1}.w"


def _conv_has_bias(spec, i):
    nxt = spec.layers[i + 1] if i + 1 < len(spec.layers) else None
    return not isinstance(nxt, BatchNorm)


def model_init(spec, seed):
    """Kaiming-style init: fan-in scaled Gaussians, zero biases, BN at (1, 0),
    running statistics at (0, 1). Deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params, bn_running = {}, {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
            params[f"L{i}.w"] = Tensor(w)
            if _conv_has_bias(spec, i):
                params[f"L{i}.b"] = Tensor(np.zeros(layer.out_ch))
        elif isinstance(layer, BatchNorm):
            params[f"L{i}.gamma"] = Tensor(np.ones(layer.ch))
            params[f"L{i}.beta"] = Tensor(np.zeros(layer.ch))
            bn_running[i] = (np.zeros(layer.ch), np.ones(layer.ch))
        elif isinstance(layer, Linear):
            w = rng.normal(0.0, np.sqrt(2.0 / layer.in_features),
                           size=(layer.in_features, layer.out_features))
            params[f"L{i}.w"] = Tensor(w)
            params[f"L{i}.b"] = Tensor(np.zeros(layer.out_features))
    return Model(spec, params, bn_running)


@dataclass
class ForwardTrace:
    logits: Tensor                  # K x N
    features: Tensor                # K x M, input to the classifier
    bn_means: dict                  # layer idx -> per-channel batch mean
    bn_vars: dict                   # layer idx -> per-channel batch variance


def _batch_stats(x):
    mu = T.reduce_mean(x, axes=(0, 2, 3))
    centered = T.add_channel(x, T.neg(mu))
    var = T.reduce_mean(T.square(centered), axes=(0, 2, 3))
    return mu, centered, var


def model_forward(model, x, bn_mode="batch", params=None):
    """Run the network on a K x C x H x W batch.

    ``bn_mode`` picks the normalization statistics: "batch" uses the current
    batch's mean/variance (kept on the graph), "running" uses the stored
    running statistics. Batch statistics are traced in both modes.
    """
    if bn_mode not in ("batch", "running"):
        raise ValueError(f"unknown bn_mode {bn_mode!r}")
    spec = model.spec
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(
            f"input shape {x.shape} does not match spec {spec.input_shape}")
    p = params if params is not None else model.params
    bn_means, bn_vars = {}, {}
    out, features = x, None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            out = T.conv2d(out, p[f"L{i}.w"], layer.stride, layer.pad)
            if f"L{i}.b" in p:
                out = T.add_channel(out, p[f"L{i}.b"])
        elif isinstance(layer, BatchNorm):
            mu, centered, var = _batch_stats(out)
            bn_means[i], bn_vars[i] = mu, var
            if bn_mode == "batch":
                inv = 1.0 / T.sqrt(var + layer.eps)
                normed = T.mul_channel(centered, inv)
            else:
                rm, rv = model.bn_running[i]
                inv = Tensor(1.0 / np.sqrt(rv + layer.eps))
                normed = T.mul_channel(T.add_channel(out, Tensor(-rm)), inv)
            out = T.channel_affine(normed, p[f"L{i}.gamma"], p[f"L{i}.beta"])
        elif isinstance(layer, ReLU):
            out = T.relu(out)
        elif isinstance(layer, AvgPool):
            out = T.avg_pool2(out, layer.k)
        elif isinstance(layer, MaxPool):
            out = T.max_pool2(out, layer.k)
        elif isinstance(layer, Flatten):
            out = T.reshape(out, (out.shape[0], out.size // out.shape[0]))
        elif isinstance(layer, Linear):
            features = out
            out = T.matmul(out, p[f"L{i}.w"])
            out = T.add(out, T.broadcast_trailing(p[f"L{i}.b"], out.shape))
    return ForwardTrace(out, features, bn_means, bn_vars)


def update_running_stats(model, trace, momentum=0.1):
    """Fold a trace's batch statistics into the running estimates (training
    utility; forward passes themselves never mutate the model)."""
    for i, mu in trace.bn_means.items():
        rm, rv = model.bn_running[i]
        model.bn_running[i] = (
            (1 - momentum) * rm + momentum * mu.data,
            (1 - momentum) * rv + momentum * trace.bn_vars[i].data,
        )


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, stabilized by max subtraction.

    The max shift is treated as a constant: the true loss is invariant to
    it, so its gradient contribution is identically zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k, n = logits.shape
    if labels.shape != (k,):
        raise ValueError(f"expected {k} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range [0, {n})")
    shift = Tensor(np.broadcast_to(logits.data.max(axis=1, keepdims=True), (k, n)).copy())
    z = T.sub(logits, shift)
    log_norm = T.log(T.reduce_sum(T.exp(z), axes=(1,)))
    onehot = np.zeros((k, n))
    onehot[np.arange(k), labels] = 1.0
    picked = T.reduce_sum(T.mul(z, Tensor(onehot)), axes=(1,))
    return T.reduce_mean(T.sub(log_norm, picked))
