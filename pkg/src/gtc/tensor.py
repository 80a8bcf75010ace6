"""Dense float32 tensors with reverse-mode automatic differentiation.

Every forward op accumulates in a fixed, ascending-index order so that results
are bit-reproducible; the shift-based inference engine relies on this to be
compared bit for bit with the float path. Backward passes use BLAS.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from gtc import _kernels

_DTYPE = np.float32
_GRAD_ENABLED = True
_ORDERED = False


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the compute dtype (used by float64 gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def ordered_accumulation():
    """Force the fixed-order matmul kernel even while gradients are tracked."""
    global _ORDERED
    prev = _ORDERED
    _ORDERED = True
    try:
        yield
    finally:
        _ORDERED = prev


class GraphError(RuntimeError):
    pass


class SeededRng:
    """PCG64 stream; the same seed always yields the same draws."""

    def __init__(self, seed: int, stream: Optional[int] = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        entropy = self.seed if stream is None else [self.seed, int(stream)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def random(self, shape):
        return self._gen.random(shape)

    def normal(self, shape):
        return self._gen.standard_normal(shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict):
        self._gen.bit_generator.state = value


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; ``backward_fn(grad)`` returns one gradient per parent."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss._consumed:
        raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")
    if loss.data.size != 1:
        raise GraphError("backward() needs a scalar loss")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Pointwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                     "mul")


mul_pointwise = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only; never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return make_node(out.astype(z.dtype, copy=False), (x,), lambda g: (g * s,), "softplus")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                     "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return make_node(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return make_node(np.asarray(out, dtype=x.data.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat_flat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate the raveled tensors into one vector."""
    sizes = [t.size for t in tensors]
    out = np.concatenate([t.data.ravel() for t in tensors])

    def bw(g):
        parts, start = [], 0
        for t, n in zip(tensors, sizes):
            parts.append(g[start:start + n].reshape(t.shape))
            start += n
        return tuple(parts)

    return make_node(out, tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def _tracking(*ts) -> bool:
    return not _ORDERED and _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _ordered_mm(a: np.ndarray, b: np.ndarray, fast: bool = False) -> np.ndarray:
    # Training graphs take the BLAS path; inference keeps the fixed summation order
    # so that float and shift engines agree bit for bit.
    if fast:
        return a @ b.astype(a.dtype, copy=False)
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    if a.shape[1] == 0:
        out[:] = 0
        return out
    return _kernels.ordered_matmul(a, b, out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m x k) @ (k x n), summing over k in ascending order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _ordered_mm(a.data, b.data, _tracking(a, b))
    return make_node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ValueError(f"non-integral conv output size for input {size}, kernel {k}, stride {stride}, pad {pad}")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Rows are output positions (n, oh, ow); columns are (c, i, j) in C order."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=x.dtype)
    return _kernels.im2col(xp, kh, kw, stride, ho, wo, cols), ho, wo


def col2im(dcols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    _kernels.col2im(np.ascontiguousarray(dcols), kh, kw, stride, ho, wo, dxp)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N x C x H x W input with F x C x kh x kw filters, zero padded."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    f, c, kh, kw = w.shape
    n = x.shape[0]
    cols, ho, wo = im2col(x.data, kh, kw, stride, padding)
    wmat = np.ascontiguousarray(w.data.reshape(f, -1).T)
    out2 = _ordered_mm(cols, wmat, _tracking(x, w))
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (cols.T @ g2).T.reshape(w.shape)
        dx = col2im(g2 @ wmat.T, x.shape, kh, kw, stride, padding, ho, wo) if x.requires_grad else None
        return dx, dw

    return make_node(out, (x, w), bw, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError("pool window larger than input")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=x.data.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    _kernels.maxpool(np.ascontiguousarray(x.data), k, stride, ho, wo, out, arg)

    def bw(g):
        dx = np.zeros_like(x.data)
        return (_kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w, dx),)

    return make_node(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def dropout_mask(shape, p: float, rng: SeededRng) -> np.ndarray:
    """Inverted-dropout mask: 0 for dropped units, 1/(1-p) for kept ones."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep.astype(_DTYPE) * _DTYPE(1.0 / (1.0 - p))


def dropout(x: Tensor, p: float, rng: Optional[SeededRng] = None, training: bool = True,
            mask: Optional[np.ndarray] = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng or a mask")
        mask = dropout_mask(x.shape, p, rng)
    return mul(x, Tensor(mask))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """(gamma / sigma) * (x - mu) + beta with per-channel statistics on axis 1."""
    c = x.shape[1]
    for t in (gamma, beta, mu, sigma):
        if t.shape != (c,):
            raise ValueError(f"batchnorm expects per-channel vectors of length {c}, got {t.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("batchnorm sigma must be positive")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    s = reshape(div(gamma, sigma), bshape)
    return add(mul(sub(x, reshape(mu, bshape)), s), reshape(beta, bshape))


def batch_moments(x: Tensor):
    """Per-channel mean and (biased) variance over every axis except 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    mu = mean(x, axis=axes)
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    var = mean(square(sub(x, reshape(mu, bshape))), axis=axes)
    return mu, var


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
