"""Multiplication-free inference.

Every weight is a ``(sign, k)`` pair standing for ``sign * 2**k``. Applying
it to a float32 activation adds ``k`` to the activation's exponent field and
flips the sign bit when the weight is negative, so the dense and conv layers
need only integer additions on bit patterns plus float additions. Activation
functions keep full precision.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from gtc import _kernels
from gtc import tensor as T
from gtc.layers import (Activation, BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool, Model,
                        VaeModel, bn_eval_scale)
from gtc.quant import QuantizedLayer, quantize_layer, quantize_tensor
from gtc.tensor import Tensor

MAX_SHIFT = 126
SIGN_BIT = 0x80000000
EXP_FIELD = 0x7F800000
MAX_FINITE_BITS = 0x7F7FFFFF


class ExportError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftWeight:
    sign: int
    k: Optional[int] = None

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0 or 1, got {self.sign}")
        if self.sign == 0:
            if self.k is not None:
                raise ValueError("a zero weight carries no shift")
        elif self.k is None or abs(self.k) > MAX_SHIFT:
            raise ValueError(f"shift must satisfy |k| <= {MAX_SHIFT}, got {self.k}")


@dataclass
class OpCounter:
    """Operation tallies for one or more forward passes.

    A zero weight still counts as a shift application (its product is a
    signed zero produced without arithmetic).
    """

    multiplies: int = 0
    shift_applications: int = 0
    additions: int = 0
    sign_flips: int = 0
    overflows: int = 0
    underflows: int = 0

    def add_counts(self, counts: np.ndarray) -> None:
        self.shift_applications += int(counts[0])
        self.additions += int(counts[1])
        self.sign_flips += int(counts[2])
        self.overflows += int(counts[3])
        self.underflows += int(counts[4])

    def as_dict(self) -> dict:
        return {"multiplies": self.multiplies, "shifts": self.shift_applications,
                "adds": self.additions, "sign_flips": self.sign_flips,
                "overflows": self.overflows, "underflows": self.underflows}


# ---------------------------------------------------------------------------
# scalar and vector primitives
# ---------------------------------------------------------------------------

def f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def bits_f32(b: int) -> float:
    return struct.unpack("<f", struct.pack("<I", b & 0xFFFFFFFF))[0]


def shift_multiply(x: float, w: ShiftWeight, ctr: Optional[OpCounter] = None) -> float:
    """``x * w.sign * 2**w.k`` for a float32 ``x`` through the exponent field."""
    ctr = OpCounter() if ctr is None else ctr
    xb = f32_bits(x)
    e = (xb & EXP_FIELD) >> 23
    if e == 0xFF:
        raise ValueError("shift_multiply needs a finite input")
    ctr.shift_applications += 1
    sbit = xb & SIGN_BIT
    if w.sign == 0 or e == 0:
        r = sbit
    else:
        ne = e + w.k
        if ne >= 255:
            r = sbit | MAX_FINITE_BITS
            ctr.overflows += 1
        elif ne <= 0:
            r = sbit
            ctr.underflows += 1
        else:
            r = (xb & ~EXP_FIELD & 0xFFFFFFFF) | (ne << 23)
    if w.sign < 0:
        r ^= SIGN_BIT
        ctr.sign_flips += 1
    return bits_f32(r)


def shift_multiply_array(x: np.ndarray, signs: np.ndarray, shifts: np.ndarray,
                         ctr: Optional[OpCounter] = None) -> np.ndarray:
    """Elementwise (broadcasting) version of :func:`shift_multiply` on float32 arrays."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("shift_multiply needs finite inputs")
    x, signs, shifts = np.broadcast_arrays(x, np.asarray(signs), np.asarray(shifts))
    xb = x.view(np.uint32).astype(np.int64)
    sbit = xb & SIGN_BIT
    e = (xb & EXP_FIELD) >> 23
    ne = e + shifts.astype(np.int64)
    live = (signs != 0) & (e != 0)
    over = live & (ne >= 255)
    under = live & (ne <= 0)
    normal = live & ~over & ~under
    r = sbit.copy()
    r[normal] = (xb[normal] & (0xFFFFFFFF ^ EXP_FIELD)) | (ne[normal] << 23)
    r[over] = sbit[over] | MAX_FINITE_BITS
    neg = signs < 0
    r[neg] ^= SIGN_BIT
    if ctr is not None:
        ctr.shift_applications += int(x.size)
        ctr.sign_flips += int(neg.sum())
        ctr.overflows += int(over.sum())
        ctr.underflows += int(under.sum())
    return r.astype(np.uint32).view(np.float32)


def _compose(signs: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """float32 values ``sign * 2**k`` assembled directly from bit fields."""
    signs = np.asarray(signs)
    b = ((np.asarray(shifts, dtype=np.int64) + 127) << 23).astype(np.uint32)
    b = np.where(signs == 0, 0, b).astype(np.uint32)
    b[signs < 0] |= np.uint32(SIGN_BIT)
    return b.view(np.float32)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ShiftLayer:
    """One layer of a :class:`ShiftModel`; parameter arrays are read-only."""

    spec: object
    name: str = ""
    w_signs: Optional[np.ndarray] = None
    w_shifts: Optional[np.ndarray] = None
    b_signs: Optional[np.ndarray] = None
    b_shifts: Optional[np.ndarray] = None
    bn_const: Optional[np.ndarray] = None

    def weights(self) -> np.ndarray:
        return _compose(self.w_signs, self.w_shifts)

    def bias(self) -> np.ndarray:
        return _compose(self.b_signs, self.b_shifts)


@dataclass(frozen=True)
class ShiftModel:
    layers: tuple
    input_shape: tuple
    quantized: tuple = field(default=())

    def parameter_count(self) -> int:
        return sum(q.size for q in self.quantized)


def _codes(q: QuantizedLayer, name: str):
    if q.m is not None and max(abs(q.m), abs(q.M)) > MAX_SHIFT:
        raise ExportError(f"layer {name}: exponent range [{q.m}, {q.M}] exceeds +-{MAX_SHIFT}; "
                          "retrain with a larger bit penalty")
    shifts = np.where(q.signs != 0, q.exponents, 0).astype(np.int64)
    return q.signs.astype(np.int8).reshape(q.shape), shifts.reshape(q.shape)


def export_shift_model(model: Model) -> ShiftModel:
    """Freeze the student of ``model`` into shift codes with batchnorm folded."""
    layers, quantized = [], []
    for i, spec in enumerate(model.layers):
        if isinstance(spec, (Dense, Conv2D)):
            p, qp, name = model.params[i], model.quant_params(i), model.names[i]
            qw = quantize_tensor(p["W"], qp, name)
            qb = quantize_tensor(p["b"], qp, name)
            ws, wk = _codes(qw, name)
            bs, bk = _codes(qb, name)
            quantized.append(quantize_layer([p["W"], p["b"]], qp, name))
            layers.append(ShiftLayer(spec, name, _frozen(ws), _frozen(wk), _frozen(bs), _frozen(bk)))
        elif isinstance(spec, BatchNorm):
            name = model.names[i]
            p, run = model.params[i], model.running[i]
            with T.default_dtype(np.float32):
                scale = bn_eval_scale(p["gamma"].data, run["var"])
            qs = quantize_tensor(scale, model.quant_params(i), name)
            ss, sk = _codes(qs, name)
            s_tilde = _compose(ss, sk)
            # the one multiply here happens at export time, never at inference
            const = (p["beta"].data.astype(np.float32) - s_tilde * run["mean"].astype(np.float32))
            quantized.append(qs)
            layers.append(ShiftLayer(spec, name, _frozen(ss), _frozen(sk), bn_const=_frozen(const)))
        else:
            layers.append(ShiftLayer(spec))
    return ShiftModel(tuple(layers), tuple(model.input_shape), tuple(quantized))


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

def _shift_mm(a: np.ndarray, signs: np.ndarray, shifts: np.ndarray, ctr: OpCounter) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite activation in shift engine")
    out = np.empty((a.shape[0], signs.shape[1]), dtype=np.float32)
    counts = np.zeros(5, dtype=np.int64)
    _kernels.shift_matmul(a.view(np.uint32), np.ascontiguousarray(signs),
                          np.ascontiguousarray(shifts), out, counts)
    ctr.add_counts(counts)
    return out


def _float_mm(a: np.ndarray, w: np.ndarray, ctr: OpCounter) -> np.ndarray:
    out = T._ordered_mm(np.asarray(a, dtype=np.float32), np.asarray(w, dtype=np.float32))
    m, k = a.shape
    ctr.multiplies += m * k * w.shape[1]
    ctr.additions += m * max(k - 1, 0) * w.shape[1]
    return out


def _activation(kind: str, x: np.ndarray) -> np.ndarray:
    fn = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid,
          "softmax": lambda t: T.softmax(t, axis=-1)}[kind]
    with T.no_grad():
        return fn(Tensor(x)).data


def _run(layers, input_shape, x, ctr: OpCounter, engine: str, logits: bool = False) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if tuple(x.shape[1:]) != tuple(input_shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {tuple(input_shape)}")
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        spec = layer.spec
        if isinstance(spec, Dense):
            if x.ndim != 2 or x.shape[1] != spec.in_features:
                raise ValueError(f"{layer.name}: expected (n, {spec.in_features}) input, got {x.shape}")
            if engine == "shift":
                y = _shift_mm(x, layer.w_signs, layer.w_shifts, ctr)
            else:
                y = _float_mm(x, layer.weights(), ctr)
            x = y + layer.bias()
            ctr.additions += x.size
        elif isinstance(spec, Conv2D):
            if x.ndim != 4 or x.shape[1] != spec.in_ch:
                raise ValueError(f"{layer.name}: expected {spec.in_ch} input channels, got {x.shape}")
            n = x.shape[0]
            cols, ho, wo = T.im2col(x, spec.kh, spec.kw, spec.stride, spec.pad)
            f = spec.out_ch
            if engine == "shift":
                y = _shift_mm(cols, layer.w_signs.reshape(f, -1).T, layer.w_shifts.reshape(f, -1).T, ctr)
            else:
                y = _float_mm(cols, np.ascontiguousarray(layer.weights().reshape(f, -1).T), ctr)
            x = np.ascontiguousarray(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)) + layer.bias().reshape(1, -1, 1, 1)
            ctr.additions += x.size
        elif isinstance(spec, BatchNorm):
            bshape = (1, spec.ch) + (1,) * (x.ndim - 2)
            signs, shifts = layer.w_signs.reshape(bshape), layer.w_shifts.reshape(bshape)
            if engine == "shift":
                y = shift_multiply_array(x, signs, shifts, ctr)
            else:
                y = x * _compose(signs, shifts)
                ctr.multiplies += x.size
            x = y + layer.bn_const.reshape(bshape)
            ctr.additions += x.size
        elif isinstance(spec, MaxPool):
            with T.no_grad():
                x = T.maxpool2d(Tensor(x), spec.k, spec.stride).data
        elif isinstance(spec, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(spec, Dropout):
            pass
        elif isinstance(spec, Activation):
            if not (logits and i == last and spec.kind in ("softmax", "sigmoid")):
                x = _activation(spec.kind, x)
    return x


def shift_forward(sm: ShiftModel, x, ctr: Optional[OpCounter] = None, logits: bool = False) -> np.ndarray:
    """Eval-mode forward pass with every weight applied as a shift."""
    return _run(sm.layers, sm.input_shape, x, OpCounter() if ctr is None else ctr, "shift", logits)


def float_forward(sm: ShiftModel, x, ctr: Optional[OpCounter] = None, logits: bool = False) -> np.ndarray:
    """Reference engine: the same network with ordinary multiplies, counted."""
    return _run(sm.layers, sm.input_shape, x, OpCounter() if ctr is None else ctr, "float", logits)


def dequantize_shift_model(sm: ShiftModel) -> list[np.ndarray]:
    """Dense weight arrays per parameterized layer, weights then biases."""
    out = []
    for layer in sm.layers:
        if layer.w_signs is not None:
            out.append(layer.weights())
            if layer.b_signs is not None:
                out.append(layer.bias())
    return out


@dataclass(frozen=True)
class ShiftVae:
    encoder: ShiftModel
    mean_head: ShiftModel
    logvar_head: ShiftModel
    decoder: ShiftModel

    @property
    def quantized(self) -> tuple:
        return (self.encoder.quantized + self.mean_head.quantized
                + self.logvar_head.quantized + self.decoder.quantized)

    def parameter_count(self) -> int:
        return sum(q.size for q in self.quantized)


def export_shift_vae(vae: VaeModel) -> ShiftVae:
    return ShiftVae(export_shift_model(vae.encoder), export_shift_model(vae.mean_head),
                    export_shift_model(vae.logvar_head), export_shift_model(vae.decoder))


def shift_vae_forward(sv: ShiftVae, x, ctr: Optional[OpCounter] = None, engine: str = "shift") -> np.ndarray:
    """Reconstruction through the latent mean (no sampling at inference)."""
    ctr = OpCounter() if ctr is None else ctr
    run = shift_forward if engine == "shift" else float_forward
    h = run(sv.encoder, x, ctr)
    mu = run(sv.mean_head, h, ctr)
    return run(sv.decoder, mu, ctr)


AnyShift = Union[ShiftModel, ShiftVae]


def _pass(sm: AnyShift, x, ctr: OpCounter, engine: str) -> np.ndarray:
    if isinstance(sm, ShiftVae):
        return shift_vae_forward(sm, x, ctr, engine)
    return (shift_forward if engine == "shift" else float_forward)(sm, x, ctr)


def bench(sm: AnyShift, float_model: Union[Model, VaeModel, None], batch, repeats: int = 3) -> dict:
    """Op counts, wall time per pass and storage sizes for both engines.

    The outputs of the two engines are checked for bit equality before any
    timing is taken.
    """
    from gtc.model_io import encode_gtcq

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float32)
    counters = {"shift": OpCounter(), "float": OpCounter()}
    outs = {e: _pass(sm, x, counters[e], e) for e in counters}
    if outs["shift"].tobytes() != outs["float"].tobytes():
        raise AssertionError("shift and float engines disagree")
    report: dict = {}
    for engine, ctr in counters.items():
        t0 = time.perf_counter_ns()
        for _ in range(repeats):
            _pass(sm, x, OpCounter(), engine)
        wall = (time.perf_counter_ns() - t0) / repeats
        report[engine] = {"multiplies": ctr.multiplies, "shifts": ctr.shift_applications,
                          "adds": ctr.additions, "wall_ns_per_pass": int(wall)}
    n_params = sm.parameter_count() if float_model is None else float_model.parameter_count()
    float_bytes = 4 * n_params
    gtcq_bytes = len(encode_gtcq(list(sm.quantized)))
    report["sizes"] = {"float_bytes": float_bytes, "gtcq_bytes": gtcq_bytes,
                       "ratio": float_bytes / gtcq_bytes}
    return report


def shift_model_from_layers(model: Model, layers) -> ShiftModel:
    """Rebuild a :class:`ShiftModel` from stored joint records and a topology.

    Records are matched to ``model``'s parameterized layers in order. Batchnorm
    additive constants come from ``model`` (beta and running mean), so a model
    with batchnorm must carry trained values.
    """
    layers = list(layers)
    if len(layers) != len(model.param_layers):
        raise ValueError(f"{len(layers)} stored layers for {len(model.param_layers)} parameterized layers")
    out = []
    records = iter(layers)
    for i, spec in enumerate(model.layers):
        if i not in model.params:
            out.append(ShiftLayer(spec))
            continue
        q = next(records)
        name = model.names[i]
        signs, shifts = _codes(q, name)
        signs, shifts = signs.ravel(), shifts.ravel()
        if isinstance(spec, BatchNorm):
            if signs.size != spec.ch:
                raise ValueError(f"layer {name}: stored size {signs.size} does not match {spec.ch}")
            s_tilde = _compose(signs, shifts)
            p, run = model.params[i], model.running[i]
            const = p["beta"].data.astype(np.float32) - s_tilde * run["mean"].astype(np.float32)
            out.append(ShiftLayer(spec, name, _frozen(signs), _frozen(shifts), bn_const=_frozen(const)))
            continue
        wshape = model.params[i]["W"].shape
        nw = int(np.prod(wshape))
        if signs.size != nw + model.params[i]["b"].size:
            raise ValueError(f"layer {name}: stored size {signs.size} does not match the topology")
        out.append(ShiftLayer(spec, name, _frozen(signs[:nw].reshape(wshape)), _frozen(shifts[:nw].reshape(wshape)),
                              _frozen(signs[nw:]), _frozen(shifts[nw:])))
    return ShiftModel(tuple(out), tuple(model.input_shape), tuple(layers))


def shift_vae_from_layers(vae: VaeModel, layers) -> ShiftVae:
    layers = list(layers)
    parts, pos = [], 0
    for _, m in vae.parts:
        k = len(m.param_layers)
        parts.append(shift_model_from_layers(m, layers[pos:pos + k]))
        pos += k
    if pos != len(layers):
        raise ValueError(f"{len(layers)} stored layers for {pos} parameterized layers")
    return ShiftVae(*parts)
