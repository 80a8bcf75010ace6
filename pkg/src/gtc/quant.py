"""Learnable power-of-two weight quantizer.

A weight ``w`` maps to ``sign(w) * 2**round(theta1 + theta2 * log2|w|)``,
where ``sign`` is zero inside ``|w| < eps_zero``. A layer's storage width is
``1 + ceil(log2(M - m + 1))`` bits for exponent range ``[m, M]`` and the bit
cost of a network is ``sum(2**bits)``. Gradients treat round and ceil as the
identity (straight-through).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from gtc.tensor import SeededRng, Tensor, make_node

DEFAULT_EPS_ZERO = 2.0 ** -24
LN2 = math.log(2.0)

ROUNDING_MODES = ("nearest", "stochastic", "none")


@dataclass(frozen=True)
class QuantParams:
    theta1: float = 0.0
    theta2: float = 1.0
    eps_zero: float = DEFAULT_EPS_ZERO

    def __post_init__(self):
        if not (math.isfinite(self.theta1) and math.isfinite(self.theta2)):
            raise ValueError("theta1 and theta2 must be finite")
        if not self.eps_zero > 0:
            raise ValueError("eps_zero must be positive")


@dataclass
class QuantizedLayer:
    """Per-weight (sign, exponent) codes for one layer.

    ``exponents`` is meaningful only where ``signs != 0`` and is stored as 0
    elsewhere. ``m``/``M`` are None for a layer with no nonzero entry.
    """

    signs: np.ndarray
    exponents: np.ndarray
    m: Optional[int]
    M: Optional[int]
    bits: int
    theta1: float = 0.0
    theta2: float = 1.0
    name: str = ""
    shape: tuple = field(default=())

    def __post_init__(self):
        if not self.shape:
            self.shape = tuple(self.signs.shape)

    @property
    def all_zero(self) -> bool:
        return self.m is None

    @property
    def size(self) -> int:
        return int(self.signs.size)

    def dequantize(self) -> np.ndarray:
        vals = np.ldexp(np.float32(1.0), self.exponents.astype(np.int32)).astype(np.float32)
        return (self.signs.astype(np.float32) * vals).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (self.m == other.m and self.M == other.M and self.bits == other.bits
                and self.name == other.name and tuple(self.shape) == tuple(other.shape)
                and np.float32(self.theta1) == np.float32(other.theta1)
                and np.float32(self.theta2) == np.float32(other.theta2)
                and np.array_equal(self.signs.ravel(), other.signs.ravel())
                and np.array_equal(self.exponents.ravel(), other.exponents.ravel()))


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _round(q: np.ndarray, rounding: str, rng: Optional[SeededRng]) -> np.ndarray:
    if rounding == "nearest":
        return round_half_away(q)
    if rounding == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        return np.floor(q + rng.random(q.shape))
    if rounding == "none":
        return q
    raise ValueError(f"unknown rounding mode {rounding!r}")


def layer_bits(m: Optional[int], M: Optional[int]) -> int:
    """1 + ceil(log2(M - m + 1)); a layer with no nonzero entry reports 1."""
    if m is None:
        return 1
    if M < m:
        raise ValueError("M must be >= m")
    return 1 + (M - m).bit_length()


def code_width(m: Optional[int], M: Optional[int]) -> int:
    """Storage width for the exponent code: ceil(log2(M - m + 2)), code 0 = zero weight."""
    if m is None:
        return 0
    return (M - m + 1).bit_length()


# ---------------------------------------------------------------------------
# scalar / array reference functions
# ---------------------------------------------------------------------------

def q_transform(w, p: QuantParams):
    return p.theta1 + p.theta2 * np.log2(np.abs(w))


def signum_eps(w, eps: float = DEFAULT_EPS_ZERO):
    """-1, 0 or +1; zero iff |w| < eps."""
    w = np.asarray(w, dtype=np.float64)
    out = np.where(np.abs(w) < eps, 0, np.sign(w)).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def quantize_weight(w: float, p: QuantParams):
    """Return ``(sign, exponent)``; exponent is None for a zero weight."""
    s = signum_eps(w, p.eps_zero)
    if s == 0:
        return 0, None
    return s, int(round_half_away(q_transform(float(w), p)))


def _scan(signs: np.ndarray, exps: np.ndarray):
    nz = signs != 0
    if not nz.any():
        return None, None
    e = exps[nz]
    return int(e.min()), int(e.max())


def quantize_array(w: np.ndarray, p: QuantParams, rounding: str = "nearest",
                   rng: Optional[SeededRng] = None):
    """Vectorised core: returns (signs int8, exponents int32, q float64)."""
    w = np.asarray(w)
    signs = signum_eps(w, p.eps_zero) if w.ndim else np.int8(signum_eps(w, p.eps_zero))
    signs = np.asarray(signs, dtype=np.int8)
    nz = signs != 0
    q = np.zeros(w.shape, dtype=np.float64)
    q[nz] = p.theta1 + p.theta2 * np.log2(np.abs(w[nz].astype(np.float64)))
    r = np.zeros_like(q)
    if nz.any():
        r[nz] = _round(q[nz], rounding, rng)
    return signs, r.astype(np.int64).astype(np.int32), q


def quantize_tensor(W, p: QuantParams, name: str = "", rounding: str = "nearest",
                    rng: Optional[SeededRng] = None) -> QuantizedLayer:
    w = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float32)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    signs, exps, _ = quantize_array(w, p, rounding, rng)
    m, M = _scan(signs, exps)
    return QuantizedLayer(signs=signs, exponents=exps, m=m, M=M, bits=layer_bits(m, M),
                          theta1=float(p.theta1), theta2=float(p.theta2), name=name,
                          shape=tuple(w.shape))


def quantize_layer(tensors: Sequence, p: QuantParams, name: str = "",
                   rounding: str = "nearest") -> QuantizedLayer:
    """Quantize a layer's weight and bias jointly as one flat vector."""
    flat = np.concatenate([np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float32).ravel()
                           for t in tensors])
    return quantize_tensor(flat, p, name=name, rounding=rounding)


def bit_cost(layers: Sequence[QuantizedLayer]) -> float:
    if not layers:
        raise ValueError("bit_cost needs at least one layer")
    return float(sum(2.0 ** layer.bits for layer in layers))


def grad_quantize(w: float, p: QuantParams, upstream: float = 1.0, rounding: str = "nearest"):
    """Straight-through gradients ``(dL/dw, dL/dtheta1, dL/dtheta2)`` of one quantized weight."""
    s, e = quantize_weight(w, p)
    if s == 0:
        return 0.0, 0.0, 0.0
    q = q_transform(float(w), p)
    wq = s * 2.0 ** (e if rounding == "nearest" else q)
    return (upstream * wq * p.theta2 / w,
            upstream * wq * LN2,
            upstream * wq * LN2 * math.log2(abs(w)))


def _extremes(w: np.ndarray, p: QuantParams, rounding: str):
    """Arg-extreme indices of q over nonzero entries, plus the (possibly rounded) range.

    The arg-max/arg-min are taken on the unrounded q (first index on exact
    ties); because rounding is monotone these elements also attain the
    rounded max/min.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    nz_idx = np.flatnonzero(np.abs(w) >= p.eps_zero)
    if nz_idx.size == 0:
        return None
    q = p.theta1 + p.theta2 * np.log2(np.abs(w[nz_idx]))
    ia, ib = int(np.argmax(q)), int(np.argmin(q))
    if rounding == "none":
        hi, lo = q[ia], q[ib]
    else:
        hi, lo = round_half_away(q[ia]), round_half_away(q[ib])
    return int(nz_idx[ia]), int(nz_idx[ib]), float(hi), float(lo)


def _layer_cost(hi: float, lo: float, rounding: str) -> tuple[float, float]:
    span = hi - lo + 1.0
    if rounding == "none":
        bits = 1.0 + math.log2(span)
    else:
        bits = float(layer_bits(int(lo), int(hi)))
    return 2.0 ** bits, span


def grad_bit_cost(weights: Sequence[np.ndarray], params: Sequence[QuantParams], upstream: float = 1.0,
                  rounding: str = "nearest"):
    """Per-layer ``(dB/dtheta1, dB/dtheta2)`` with round and ceil passed straight through.

    dB/dtheta = 2**bits / (M - m + 1) * (dM/dtheta - dm/dtheta); dM/dtheta1 = 1 and
    dM/dtheta2 = log2|w_argmax|, symmetrically for m. The theta1 terms cancel.
    """
    out = []
    for w, p in zip(weights, params):
        ext = _extremes(w, p, rounding)
        if ext is None:
            out.append((0.0, 0.0))
            continue
        ia, ib, hi, lo = ext
        cost, span = _layer_cost(hi, lo, rounding)
        flat = np.asarray(w, dtype=np.float64).ravel()
        k = upstream * cost / span
        d1 = k * (1.0 - 1.0)
        d2 = k * (math.log2(abs(flat[ia])) - math.log2(abs(flat[ib])))
        out.append((d1, d2))
    return out


# ---------------------------------------------------------------------------
# autodiff ops
# ---------------------------------------------------------------------------

def quantize(w: Tensor, theta1: Tensor, theta2: Tensor, eps_zero: float = DEFAULT_EPS_ZERO,
             rounding: str = "nearest", rng: Optional[SeededRng] = None) -> Tensor:
    """Dequantized power-of-two tensor with straight-through gradients.

    ``rounding="none"`` gives the smooth surrogate ``sign(w) * 2**q`` used
    by the gradient checks.
    """
    p = QuantParams(float(theta1.data), float(theta2.data), eps_zero)
    signs, exps, q = quantize_array(w.data, p, rounding, rng)
    nz = signs != 0
    if rounding == "none":
        mag = np.exp2(q)
    else:
        mag = np.ldexp(1.0, exps)
    wq64 = np.where(nz, signs * mag, 0.0)
    dtype = w.data.dtype
    out = wq64.astype(dtype)

    def bw(g):
        g64 = g.astype(np.float64) * wq64
        safe_w = np.where(nz, w.data.astype(np.float64), 1.0)
        dw = g64 * float(theta2.data) / safe_w
        log_abs = np.where(nz, np.log2(np.abs(safe_w)), 0.0)
        d1 = g64.sum() * LN2
        d2 = (g64 * log_abs).sum() * LN2
        return (dw.astype(dtype), np.asarray(d1, dtype=dtype).reshape(theta1.shape),
                np.asarray(d2, dtype=dtype).reshape(theta2.shape))

    return make_node(out, (w, theta1, theta2), bw, "quantize")


def bit_cost_term(groups: Sequence[tuple[Sequence[Tensor], Tensor, Tensor]],
                  eps_zero: float = DEFAULT_EPS_ZERO, rounding: str = "nearest") -> Tensor:
    """Scalar ``sum_l 2**bits_l`` over layers given as ``(tensors, theta1, theta2)``.

    Gradients reach theta2 and the two arg-extreme weights of each layer;
    the theta1 contributions cancel exactly.
    """
    rounding = "nearest" if rounding == "stochastic" else rounding
    parents: list[Tensor] = []
    records = []
    total = 0.0
    for tensors, t1, t2 in groups:
        p = QuantParams(float(t1.data), float(t2.data), eps_zero)
        flat = np.concatenate([t.data.ravel().astype(np.float64) for t in tensors])
        ext = _extremes(flat, p, rounding)
        if ext is None:
            cost, rec = 2.0, None
        else:
            ia, ib, hi, lo = ext
            cost, span = _layer_cost(hi, lo, rounding)
            rec = (ia, ib, cost / span, flat[ia], flat[ib], p.theta2)
        total += cost
        records.append((len(parents), list(tensors), rec))
        parents.extend(tensors)
        parents.extend((t1, t2))

    dtype = parents[0].data.dtype

    def bw(g):
        g = float(g)
        grads = []
        for start, tensors, rec in records:
            sizes = [t.size for t in tensors]
            flat_g = np.zeros(sum(sizes))
            d1 = d2 = 0.0
            if rec is not None:
                ia, ib, k, wa, wb, th2 = rec
                k *= g
                if ia != ib:
                    flat_g[ia] += k * th2 / (wa * LN2)
                    flat_g[ib] -= k * th2 / (wb * LN2)
                    d2 = k * (math.log2(abs(wa)) - math.log2(abs(wb)))
            off = 0
            for t, n in zip(tensors, sizes):
                grads.append(flat_g[off:off + n].reshape(t.shape).astype(dtype))
                off += n
            grads.append(np.asarray(d1, dtype=dtype).reshape(parents[start + len(tensors)].shape))
            grads.append(np.asarray(d2, dtype=dtype).reshape(parents[start + len(tensors) + 1].shape))
        return tuple(grads)

    return make_node(np.asarray(total, dtype=dtype), tuple(parents), bw, "bit_cost")
