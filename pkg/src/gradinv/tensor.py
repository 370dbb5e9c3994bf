"""Dense float64 tensors on a taped reverse-mode autodiff engine.

Every primitive computes its forward value eagerly and registers a node on
the active graph. The backward pass is built out of the same primitives, so
running it with ``differentiable=True`` yields gradient tensors that are
themselves graph nodes and support a further backward pass (gradients of
gradients). This is what lets an outer optimizer differentiate through an
inner parameter-gradient computation.

Graphs have two modes: ``recording`` (nodes are appended) and ``replay``
(forward values are computed but nothing is taped). Execution is eager and
deterministic: re-running the same composition on identical inputs is
bit-identical.
"""

import numpy as np

DTYPE = np.float64


class Tensor:
    """N-dimensional float64 array, optionally a node of a computation graph.

    Leaf tensors (``op is None``) are plain immutable values; node tensors
    remember the primitive that produced them and their input tensors.
    """

    __slots__ = ("data", "op", "inputs", "vjp", "_idx")

    def __init__(self, data, op=None, inputs=(), vjp=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self._idx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Copy of the value with no graph history."""
        return Tensor(self.data.copy())

    def __repr__(self):
        op = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}{op})"

    # Operator sugar over the primitives below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Append-only tape of primitive applications.

    Acyclic by construction: a node's inputs are either leaves or nodes
    appended earlier. ``mode`` is "recording" or "replay"; in replay mode
    primitives execute (bit-identically) without growing the tape.

    Usable as a context manager; the innermost graph is the active one.
    """

    def __init__(self, mode="recording"):
        if mode not in ("recording", "replay"):
            raise ValueError(f"unknown graph mode {mode!r}")
        self.nodes = []
        self.mode = mode

    @property
    def recording(self):
        return self.mode == "recording"

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self, "graph contexts must nest"
        return False


_GRAPH_STACK = [Graph()]


def active_graph():
    return _GRAPH_STACK[-1]


def _record(op, inputs, data, vjp):
    graph = active_graph()
    if not graph.recording:
        return Tensor(data)
    out = Tensor(data, op=op, inputs=inputs, vjp=vjp)
    out._idx = len(graph.nodes)
    graph.nodes.append(out)
    return out


def _shape_error(op, *shapes):
    pretty = " and ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{op}: incompatible shapes {pretty}")


# ---------------------------------------------------------------------------
# elementwise primitives


def _binary_shapes(op, a, b):
    # Equal shapes, or one side a scalar. Anything fancier must go through
    # the explicit broadcast/channel primitives.
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise _shape_error(op, a.shape, b.shape)


def _unbroadcast(g, ref):
    """Collapse an elementwise gradient back onto a scalar operand."""
    if ref.ndim == 0 and g.ndim != 0:
        return reduce_sum(g)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a), _unbroadcast(neg(g), b)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(mul(g, b), a),
                              _unbroadcast(mul(g, a), b)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    out = _record("div", (a, b), a.data / b.data, None)
    out.vjp = lambda g: (_unbroadcast(div(g, b), a),
                         _unbroadcast(neg(div(mul(g, out), b)), b))
    return out


def neg(a):
    return _record("neg", (a,), -a.data, lambda g: (neg(g),))


def abs_(a):
    # Derivative at 0 is taken as 0.
    sign = Tensor(np.sign(a.data))
    return _record("abs", (a,), np.abs(a.data), lambda g: (mul(g, sign),))


def sqrt(a):
    out = _record("sqrt", (a,), np.sqrt(a.data), None)
    out.vjp = lambda g: (div(g, mul(out, 2.0)),)
    return out


def square(a):
    return _record("square", (a,), a.data * a.data,
                   lambda g: (mul(g, mul(a, 2.0)),))


def exp(a):
    out = _record("exp", (a,), np.exp(a.data), None)
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    # log(0) yields -inf, as documented for the underlying math.
    return _record("log", (a,), np.log(a.data), lambda g: (div(g, a),))


def max_scalar(a, c):
    """Elementwise max(a, c) for a float threshold; relu is max_scalar(x, 0)."""
    c = float(c)
    mask = Tensor((a.data > c).astype(DTYPE))  # subgradient 0 at the tie
    return _record("max_scalar", (a,), np.maximum(a.data, c),
                   lambda g: (mul(g, mask),))


def relu(a):
    return max_scalar(a, 0.0)


# ---------------------------------------------------------------------------
# shape primitives


def broadcast_trailing(a, shape):
    """Broadcast ``a`` over leading axes so its shape becomes ``shape``.

    ``a.shape`` must equal the trailing dims of ``shape`` (a vector of per-row
    biases broadcast over the batch, for instance).
    """
    shape = tuple(shape)
    if a.ndim > len(shape) or shape[len(shape) - a.ndim:] != a.shape:
        raise _shape_error("broadcast_trailing", a.shape, shape)
    lead = tuple(range(len(shape) - a.ndim))
    data = np.broadcast_to(a.data, shape).copy()
    return _record("broadcast_trailing", (a,), data,
                   lambda g: (reduce_sum(g, axes=lead),))


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def reduce_sum(a, axes=None):
    axes = _normalize_axes(axes, a.ndim)
    in_shape = a.shape
    data = np.sum(a.data, axis=axes if axes else None)
    return _record("reduce_sum", (a,), data,
                   lambda g: (expand_to(g, in_shape, axes),))


def expand_to(a, shape, axes):
    """Inverse of reduce_sum: reinsert ``axes`` and tile up to ``shape``."""
    shape = tuple(shape)
    axes = _normalize_axes(axes, len(shape))
    data = np.broadcast_to(np.expand_dims(a.data, axes), shape).copy()
    return _record("expand_to", (a,), data,
                   lambda g: (reduce_sum(g, axes=axes),))


def reduce_mean(a, axes=None):
    axes = _normalize_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(reduce_sum(a, axes=axes), 1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)
    in_shape = a.shape
    if int(np.prod(shape)) != a.size:
        raise _shape_error("reshape", a.shape, shape)
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (reshape(g, in_shape),))


def transpose(a):
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape)
    return _record("transpose", (a,), a.data.T.copy(),
                   lambda g: (transpose(g),))


def slice_axis(a, axis, start, stop):
    axis = axis % a.ndim
    index = tuple(slice(None) if d != axis else slice(start, stop)
                  for d in range(a.ndim))
    before, after = start, a.shape[axis] - stop

    def vjp(g):
        parts = []
        if before:
            pad_shape = list(g.shape)
            pad_shape[axis] = before
            parts.append(Tensor(np.zeros(pad_shape)))
        parts.append(g)
        if after:
            pad_shape = list(g.shape)
            pad_shape[axis] = after
            parts.append(Tensor(np.zeros(pad_shape)))
        return (concat(parts, axis) if len(parts) > 1 else g,)

    return _record("slice_axis", (a,), a.data[index].copy(), vjp)


def concat(tensors, axis):
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        grads, offset = [], 0
        for t in tensors:
            extent = t.shape[axis]
            grads.append(slice_axis(g, axis, offset, offset + extent))
            offset += extent
        return tuple(grads)

    return _record("concat", tensors, data, vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# ---------------------------------------------------------------------------
# per-channel primitives (NCHW)


def _check_nchw(op, x, v):
    if x.ndim != 4 or v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise _shape_error(op, x.shape, v.shape)


def mul_channel(x, s):
    """Scale each channel of an NCHW tensor: out[k,c] = x[k,c] * s[c]."""
    _check_nchw("mul_channel", x, s)
    data = x.data * s.data[None, :, None, None]
    return _record("mul_channel", (x, s), data,
                   lambda g: (mul_channel(g, s),
                              reduce_sum(mul(g, x), axes=(0, 2, 3))))


def add_channel(x, b):
    """Shift each channel of an NCHW tensor: out[k,c] = x[k,c] + b[c]."""
    _check_nchw("add_channel", x, b)
    data = x.data + b.data[None, :, None, None]
    return _record("add_channel", (x, b), data,
                   lambda g: (g, reduce_sum(g, axes=(0, 2, 3))))


def channel_affine(x, scale, shift):
    return add_channel(mul_channel(x, scale), shift)


# ---------------------------------------------------------------------------
# 2-D cross-correlation and pooling
#
# Cross-correlation is trilinear in (input, kernel, output-cotangent), so the
# set {conv2d, conv2d_input_vjp, conv2d_weight_vjp} is closed under
# differentiation: each member's vjp is built from the other two. That is the
# property that makes the double-backward pass exact.


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride):
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _corr_shapes(op, x_shape, w_shape, stride, pad):
    n, c, h, w = x_shape
    co, ci, kh, kw = w_shape
    if ci != c or h + 2 * pad < kh or w + 2 * pad < kw:
        raise _shape_error(op, x_shape, w_shape)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return n, co, ho, wo


def _corr(x, w, stride, pad):
    n, co, ho, wo = _corr_shapes("conv2d", x.shape, w.shape, stride, pad)
    cols, _, _ = _im2col(_pad_hw(x, pad), w.shape[2], w.shape[3], stride)
    out = np.matmul(w.reshape(co, -1), cols)
    return out.reshape(n, co, ho, wo)


def _corr_input(g, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    co, ci, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    cols = np.matmul(w.reshape(co, -1).T, g.reshape(n, co, ho * wo))
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                blocks[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + wd] if pad else xp


def _corr_weight(g, x, w_shape, stride, pad):
    co, ci, kh, kw = w_shape
    cols, ho, wo = _im2col(_pad_hw(x, pad), kh, kw, stride)
    gm = g.reshape(g.shape[0], co, ho * wo)
    gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation of NCHW input with OIHW kernels."""
    data = _corr(x.data, w.data, stride, pad)
    return _record(
        "conv2d", (x, w), data,
        lambda g: (conv2d_input_vjp(g, w, x.shape, stride, pad),
                   conv2d_weight_vjp(g, x, w.shape, stride, pad)))


def conv2d_input_vjp(g, w, x_shape, stride=1, pad=0):
    """Gradient of conv2d wrt its input; itself differentiable in g and w."""
    data = _corr_input(g.data, w.data, x_shape, stride, pad)
    return _record(
        "conv2d_input_vjp", (g, w), data,
        lambda u: (conv2d(u, w, stride, pad),
                   conv2d_weight_vjp(g, u, w.shape, stride, pad)))


def conv2d_weight_vjp(g, x, w_shape, stride=1, pad=0):
    """Gradient of conv2d wrt its kernel; itself differentiable in g and x."""
    data = _corr_weight(g.data, x.data, w_shape, stride, pad)
    return _record(
        "conv2d_weight_vjp", (g, x), data,
        lambda u: (conv2d(x, u, stride, pad),
                   conv2d_input_vjp(g, u, x.shape, stride, pad)))


def _check_pool(op, x, k):
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise _shape_error(op, x.shape, (k, k))


def avg_pool2(x, k):
    """Non-overlapping k-by-k average pooling; H and W must divide by k."""
    _check_pool("avg_pool2", x, k)
    n, c, h, w = x.shape
    data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return _record("avg_pool2", (x,), data, lambda g: (avg_unpool2(g, k),))


def avg_unpool2(g, k):
    """Adjoint of avg_pool2: spread each value uniformly over its block."""
    data = np.repeat(np.repeat(g.data, k, axis=2), k, axis=3) / (k * k)
    return _record("avg_unpool2", (g,), data, lambda u: (avg_pool2(u, k),))


def _pool_blocks(data, k):
    n, c, h, w = data.shape
    return data.reshape(n, c, h // k, k, w // k, k) \
               .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def max_pool2(x, k):
    """Non-overlapping k-by-k max pooling.

    Gradient routes to the first maximal element of each block in row-major
    order, so ties break deterministically.
    """
    _check_pool("max_pool2", x, k)
    blocks = _pool_blocks(x.data, k)
    idx = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    x_shape = x.shape
    return _record("max_pool2", (x,), data,
                   lambda g: (maxpool_scatter(g, idx, k, x_shape),))


def maxpool_scatter(g, idx, k, x_shape):
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // k, w // k, k * k))
    np.put_along_axis(blocks, idx[..., None], g.data[..., None], axis=-1)
    data = blocks.reshape(n, c, h // k, w // k, k, k) \
                 .transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)
    return _record("maxpool_scatter", (g,), data,
                   lambda u: (maxpool_gather(u, idx, k),))


def maxpool_gather(u, idx, k):
    blocks = _pool_blocks(u.data, k)
    data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    x_shape = u.shape
    return _record("maxpool_gather", (u,), data,
                   lambda g: (maxpool_scatter(g, idx, k, x_shape),))


# ---------------------------------------------------------------------------
# primitive dispatch

PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "abs": abs_,
    "sqrt": sqrt, "square": square, "exp": exp, "log": log,
    "max_scalar": max_scalar, "broadcast_trailing": broadcast_trailing,
    "reduce_sum": reduce_sum, "reduce_mean": reduce_mean,
    "expand_to": expand_to, "reshape": reshape, "transpose": transpose,
    "slice_axis": slice_axis, "concat": concat, "matmul": matmul,
    "mul_channel": mul_channel, "add_channel": add_channel,
    "channel_affine": channel_affine, "conv2d": conv2d,
    "avg_pool2": avg_pool2, "max_pool2": max_pool2,
}


def record_primitive(op, *args, **kwargs):
    """Apply a primitive by id, registering the result on the active graph."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward


def _topo_order(output):
    order, visited, stack = [], set(), [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or node.op is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            stack.append((inp, False))
    return order


def backward(output, wrt, differentiable=False):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``differentiable=True`` the returned gradients are graph nodes and
    support a further backward pass; otherwise they are plain values. A wrt
    tensor that the output does not depend on gets a zero gradient rather
    than an error.
    """
    if output.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    order = _topo_order(output)
    wanted = {id(w) for w in wrt}
    grads = {id(output): Tensor(np.ones(output.shape))}
    with Graph("recording" if differentiable else "replay"):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                grads[id(node)] = g  # keep for the result lookup
            for inp, contrib in zip(node.inputs, node.vjp(g)):
                if contrib is None:
                    continue
                seen = grads.get(id(inp))
                grads[id(inp)] = contrib if seen is None else add(seen, contrib)
    return [grads[id(w)] if id(w) in grads else Tensor(np.zeros(w.shape))
            for w in wrt]


def finite_difference_gradient(f, x, step=1e-5):
    """Central-difference gradient of scalar-valued ``f`` at ``x`` (test oracle).

    ``f`` is evaluated under whatever graph mode is active, so it may itself
    contain a differentiable backward pass.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = x.data.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = f(Tensor(bumped.reshape(x.shape)))
        bumped[i] -= 2 * step
        lo = f(Tensor(bumped.reshape(x.shape)))
        hi = hi.item() if isinstance(hi, Tensor) else float(hi)
        lo = lo.item() if isinstance(lo, Tensor) else float(lo)
        out[i] = (hi - lo) / (2 * step)
    return Tensor(out.reshape(x.shape))
