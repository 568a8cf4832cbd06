"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the quality models need are provided: 2-D convolution,
relu, affine maps, spatial statistics, concatenation, slicing, broadcast
elementwise arithmetic and reductions.  Everything is double precision and
evaluated in a fixed order so repeated runs are bit-identical.
"""
import json
import struct
from itertools import count

import numpy as np

from .errors import NumericError, ParseError, ShapeError, StateError

_ids = count()


def _as_array(value):
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the information needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output", node=self.op)
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise ShapeError(f"output gradient shape {grad.shape} != output shape {self.shape}", node=self.op)
        order = _topological(self)
        grads = {self._id: grad}
        for node in reversed(order):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and parent._id not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op,
                  _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}", node=op) from None


# elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _node(out, "div", (a, b), backward)


def neg(a):
    a = _wrap(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent):
    a = _wrap(a)
    p = float(exponent)
    if p == 2.0:
        out = a.data * a.data
        return _node(out, "square", (a,), lambda g: (2.0 * a.data * g,))
    out = a.data ** p
    return _node(out, "pow", (a,), lambda g: (p * a.data ** (p - 1.0) * g,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (g / (2.0 * out),))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


# reductions and reshaping

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), a.shape).copy(),)
    return _node(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ShapeError("mean over an empty axis", node="mean")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) / n, a.shape).copy(),)
    return _node(out, "mean", (a,), backward)


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}", node="reshape") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _node(out, "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index):
    a = _wrap(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _node(np.array(out, dtype=np.float64), "getitem", (a,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list", node="concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc), node="concat") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(out, "concat", tensors, backward)


# linear algebra

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}", node="matmul")
    # one vector-matrix product per row: BLAS GEMM may use a different kernel
    # (and summation order) for remainder rows, so identical rows of ``a``
    # would not be guaranteed bit-identical outputs
    out = np.empty((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        out[i] = a.data[i] @ b.data
    return _node(out, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias):
    """``x @ weight + bias`` for x of shape (n, in) or (in,)."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    if weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}", node="affine")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}", node="affine")
    out = add(matmul(x, weight), bias)
    return reshape(out, (weight.shape[1],)) if squeeze else out


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, k, k), zero padded."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"expected 4-D input and weight, got {x.shape} and {weight.shape}", node="conv2d")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels, weight expects {wcin}", node="conv2d")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride {stride} / padding {padding}", node="conv2d")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}", node="conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # rows: (n, ho, wo); columns: (cin, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias {bias.shape} for {cout} output channels", node="conv2d")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return _node(out, "conv2d", parents, backward)


# spatial statistics over the trailing two axes

def spatial_mean(x):
    """Per-channel mean over (h, w); keeps leading axes."""
    return mean(x, axis=(-2, -1))


def spatial_var(x, mu=None):
    """Population variance over (h, w)."""
    if mu is None:
        mu = spatial_mean(x)
    d = sub(x, reshape(mu, mu.shape + (1, 1)))
    return mean(mul(d, d), axis=(-2, -1))


def spatial_cov(x, y, mu_x=None, mu_y=None):
    """Population covariance between paired maps over (h, w)."""
    x, y = _wrap(x), _wrap(y)
    if x.shape != y.shape:
        raise ShapeError(f"paired maps differ: {x.shape} vs {y.shape}", node="spatial_cov")
    if mu_x is None:
        mu_x = spatial_mean(x)
    if mu_y is None:
        mu_y = spatial_mean(y)
    dx = sub(x, reshape(mu_x, mu_x.shape + (1, 1)))
    dy = sub(y, reshape(mu_y, mu_y.shape + (1, 1)))
    return mean(mul(dx, dy), axis=(-2, -1))


class Graph:
    """A differentiable function over named parameters.

    ``fn(params, **inputs)`` builds the computation from parameter tensors and
    returns the output tensor.  ``forward`` caches the tape; ``backward`` maps
    every trainable parameter name to its gradient.
    """

    def __init__(self, fn, params, trainable=None, input_shapes=None):
        self.fn = fn
        self.params = params
        self.trainable = set(params) if trainable is None else set(trainable)
        unknown = self.trainable - set(params)
        if unknown:
            raise KeyError(f"trainable names not in params: {sorted(unknown)}")
        self.input_shapes = dict(input_shapes or {})
        self._leaves = None
        self._output = None

    def forward(self, **inputs):
        for name, shape in self.input_shapes.items():
            if name not in inputs:
                raise ShapeError(f"missing input {name!r}", node=f"input:{name}")
            got = np.shape(inputs[name].data if isinstance(inputs[name], Tensor) else inputs[name])
            if tuple(got) != tuple(shape):
                raise ShapeError(f"input {name!r} has shape {tuple(got)}, expected {tuple(shape)}",
                                 node=f"input:{name}")
        self._leaves = {k: Tensor(v, requires_grad=k in self.trainable) for k, v in self.params.items()}
        self._output = self.fn(self._leaves, **inputs)
        return self._output

    def backward(self, output_grad=None):
        if self._output is None:
            raise StateError("backward() called before forward()")
        out, self._output = self._output, None
        if out.requires_grad:
            out.backward(output_grad)
        grads = {}
        for name in sorted(self.trainable):
            g = self._leaves[name].grad
            grads[name] = np.zeros_like(self.params[name], dtype=np.float64) if g is None else g
        return grads


class Adam:
    """Adam with per-parameter step counters (parameters may be updated intermittently)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads, lr):
        """Update ``params[name]`` in place for every name in ``grads``."""
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        for name in sorted(grads):
            g = np.asarray(grads[name], dtype=np.float64)
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}", node=name)
            bad = ~np.isfinite(g)
            if bad.any():
                raise NumericError(f"non-finite gradient for {name!r}: {int(bad.sum())} of {g.size} entries "
                                   f"(first at flat index {int(np.flatnonzero(bad)[0])})")
            t = self.t.get(name, 0) + 1
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            self.m[name], self.v[name], self.t[name] = m, v, t
        return params


def adam_step(state, params, grads, lr):
    """Functional alias: apply one Adam update using optimizer ``state``."""
    return state.step(params, grads, lr)


# checkpoint container

MAGIC = b"VQAF0001"


def save_checkpoint(path, tensors, meta=None):
    """Write named float64 arrays plus a JSON metadata dict.

    Layout: magic, u32 little-endian header length, UTF-8 JSON header
    ``{"tensors": [{"name", "shape", "dtype"}...], "meta": {...}}``, then the
    little-endian float64 payloads in manifest order.
    """
    names = sorted(tensors)
    manifest = [{"name": k, "shape": list(np.shape(tensors[k])), "dtype": "<f8"} for k in names]
    header = json.dumps({"tensors": manifest, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ParseError(f"bad checkpoint magic {blob[:8]!r}", offset=0)
    if len(blob) < 12:
        raise ParseError("truncated checkpoint header", offset=8)
    (hlen,) = struct.unpack_from("<I", blob, 8)
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable checkpoint header: {exc}", offset=12) from None
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        if entry.get("dtype") != "<f8":
            raise ParseError(f"unsupported dtype {entry.get('dtype')!r} for {entry['name']}", offset=offset)
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise ParseError(f"payload for {entry['name']!r} truncated", offset=offset)
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                               offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes after payloads", offset=offset)
    return tensors, header.get("meta", {})
