"""Layer specifications, paired teacher/student models and the reference architectures."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from gtc import tensor as T
from gtc.quant import DEFAULT_EPS_ZERO, QuantParams, QuantizedLayer, quantize, quantize_layer
from gtc.tensor import SeededRng, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class BatchNorm:
    ch: int


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int


@dataclass(frozen=True)
class Activation:
    kind: str


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2D, BatchNorm, MaxPool, Activation, Dropout, Flatten]
PARAMETERIZED = (Dense, Conv2D, BatchNorm)
ACTIVATIONS = ("relu", "tanh", "sigmoid", "softmax")


def _validate_spec(spec) -> None:
    if isinstance(spec, Dense):
        ok = spec.in_features > 0 and spec.out_features > 0
    elif isinstance(spec, Conv2D):
        ok = min(spec.in_ch, spec.out_ch, spec.kh, spec.kw, spec.stride) > 0 and spec.pad >= 0
    elif isinstance(spec, BatchNorm):
        ok = spec.ch > 0
    elif isinstance(spec, MaxPool):
        ok = spec.k > 0 and spec.stride > 0
    elif isinstance(spec, Activation):
        ok = spec.kind in ACTIVATIONS
    elif isinstance(spec, Dropout):
        ok = 0 <= spec.p < 1
    elif isinstance(spec, Flatten):
        ok = True
    else:
        raise TypeError(f"unknown layer spec {spec!r}")
    if not ok:
        raise ValueError(f"invalid layer spec {spec!r}")


def output_shape(spec, shape: tuple) -> tuple:
    """Per-sample output shape of ``spec`` given a per-sample input shape."""
    if isinstance(spec, Dense):
        if shape != (spec.in_features,):
            raise ValueError(f"Dense expects ({spec.in_features},), got {shape}")
        return (spec.out_features,)
    if isinstance(spec, Conv2D):
        if len(shape) != 3 or shape[0] != spec.in_ch:
            raise ValueError(f"Conv2D expects {spec.in_ch} channels, got {shape}")
        return (spec.out_ch,
                T.conv_output_size(shape[1], spec.kh, spec.stride, spec.pad),
                T.conv_output_size(shape[2], spec.kw, spec.stride, spec.pad))
    if isinstance(spec, BatchNorm):
        if shape[0] != spec.ch:
            raise ValueError(f"BatchNorm expects {spec.ch} channels, got {shape}")
        return shape
    if isinstance(spec, MaxPool):
        c, h, w = shape
        return (c, (h - spec.k) // spec.stride + 1, (w - spec.k) // spec.stride + 1)
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    return shape


def _truncated_normal(rng: SeededRng, shape, std: float) -> np.ndarray:
    out = rng.normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(np.float32)


class Model:
    """A sequential network whose parameters feed both the teacher and the student.

    Every parameterized layer (dense, conv, batchnorm) owns one trainable
    ``(theta1, theta2)`` pair. The student is never stored: it is derived
    from the teacher weights and the thetas on every forward pass.
    """

    def __init__(self, layers: list, input_shape: tuple, seed: int = 0,
                 eps_zero: float = DEFAULT_EPS_ZERO, theta_init=(0.0, 1.0)):
        for spec in layers:
            _validate_spec(spec)
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.eps_zero = eps_zero
        self.params: dict[int, dict[str, Tensor]] = {}
        self.running: dict[int, dict[str, np.ndarray]] = {}
        self.theta: dict[int, tuple[Tensor, Tensor]] = {}
        self.names: dict[int, str] = {}

        rng = SeededRng(seed)
        shape = self.input_shape
        counts = {"conv": 0, "fc": 0, "bn": 0}
        for i, spec in enumerate(self.layers):
            new_shape = output_shape(spec, shape)
            if isinstance(spec, Dense):
                counts["fc"] += 1
                self.names[i] = f"fc{counts['fc']}"
                std = math.sqrt(2.0 / spec.in_features)
                self.params[i] = {
                    "W": Tensor(_truncated_normal(rng, (spec.in_features, spec.out_features), std), True),
                    "b": Tensor(np.zeros(spec.out_features, np.float32), True),
                }
            elif isinstance(spec, Conv2D):
                counts["conv"] += 1
                self.names[i] = f"conv{counts['conv']}"
                fan_in = spec.in_ch * spec.kh * spec.kw
                self.params[i] = {
                    "W": Tensor(_truncated_normal(rng, (spec.out_ch, spec.in_ch, spec.kh, spec.kw),
                                                  math.sqrt(2.0 / fan_in)), True),
                    "b": Tensor(np.zeros(spec.out_ch, np.float32), True),
                }
            elif isinstance(spec, BatchNorm):
                counts["bn"] += 1
                self.names[i] = f"bn{counts['bn']}"
                self.params[i] = {
                    "gamma": Tensor(np.ones(spec.ch, np.float32), True),
                    "beta": Tensor(np.zeros(spec.ch, np.float32), True),
                }
                self.running[i] = {"mean": np.zeros(spec.ch, np.float32),
                                   "var": np.ones(spec.ch, np.float32)}
            if i in self.params:
                self.theta[i] = (Tensor(np.float32(theta_init[0]), True),
                                 Tensor(np.float32(theta_init[1]), True))
            shape = new_shape
        self.output_shape = shape

    # -- introspection ------------------------------------------------------
    @property
    def param_layers(self) -> list[int]:
        return sorted(self.params)

    def weight_tensors(self) -> list[Tensor]:
        return [t for i in self.param_layers for t in self.params[i].values()]

    def theta_tensors(self) -> list[Tensor]:
        return [t for i in self.param_layers for t in self.theta[i]]

    def quant_params(self, i: int) -> QuantParams:
        t1, t2 = self.theta[i]
        return QuantParams(float(t1.data), float(t2.data), self.eps_zero)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.weight_tensors())

    def zero_grad(self) -> None:
        for t in self.weight_tensors() + self.theta_tensors():
            t.grad = None

    def quantized_tensors(self, i: int) -> list[Tensor]:
        """The tensors the student quantizes for layer ``i`` (joint m/M scan)."""
        p = self.params[i]
        if "W" in p:
            return [p["W"], p["b"]]
        return [bn_eval_scale(p["gamma"].data, self.running[i]["var"])]

    def quantize_layers(self) -> list[QuantizedLayer]:
        """Current student layers, one joint (weight + bias) record per parameterized layer."""
        return [quantize_layer(self.quantized_tensors(i), self.quant_params(i), name=self.names[i])
                for i in self.param_layers]


def bn_eval_scale(gamma: np.ndarray, var: np.ndarray) -> Tensor:
    g = np.asarray(gamma, dtype=T.get_default_dtype())
    return Tensor(g / np.sqrt(np.asarray(var, dtype=g.dtype) + g.dtype.type(BN_EPS)))


def _bn_forward(model: Model, i: int, x: Tensor, training: bool, quantized: bool,
                rounding: str, update_stats: bool) -> Tensor:
    p = model.params[i]
    run = model.running[i]
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mu, var = T.batch_moments(x)
        sigma = T.sqrt(T.add(var, BN_EPS))
        s = T.div(p["gamma"], sigma)
        if quantized:
            s = quantize(s, *model.theta[i], model.eps_zero, rounding)
        if update_stats:
            n = x.data.size // c
            unbiased = var.data * (n / max(n - 1, 1))
            run["mean"] = ((1 - BN_MOMENTUM) * run["mean"] + BN_MOMENTUM * mu.data).astype(np.float32)
            run["var"] = ((1 - BN_MOMENTUM) * run["var"] + BN_MOMENTUM * unbiased).astype(np.float32)
        return T.add(T.mul(T.sub(x, T.reshape(mu, bshape)), T.reshape(s, bshape)),
                     T.reshape(p["beta"], bshape))
    # eval: y = x * s + (beta - s * mu), the same folding the shift engine uses
    var = Tensor(run["var"].astype(x.data.dtype))
    s = T.div(p["gamma"], T.sqrt(T.add(var, BN_EPS)))
    if quantized:
        s = quantize(s, *model.theta[i], model.eps_zero, rounding)
    shift = T.sub(p["beta"], T.mul(s, Tensor(run["mean"].astype(x.data.dtype))))
    return T.add(T.mul(x, T.reshape(s, bshape)), T.reshape(shift, bshape))


def forward(model: Model, x: Tensor, mode: str = "eval", rng: Optional[SeededRng] = None,
            quantized: bool = False, masks: Optional[dict] = None, logits: bool = False,
            rounding: str = "nearest", update_stats: Optional[bool] = None) -> Tensor:
    """Run the network; ``quantized`` selects the student path.

    ``masks`` caches dropout masks by layer index so a teacher and a student
    call in the same step see identical masks. With ``logits`` the trailing
    softmax is skipped.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if update_stats is None:
        update_stats = training and not quantized
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    if masks is None:
        masks = {}
    with contextlib.nullcontext() if training else T.ordered_accumulation():
        return _run_layers(model, x, training, rng, quantized, masks, logits, rounding, update_stats)


def _run_layers(model, x, training, rng, quantized, masks, logits, rounding, update_stats):
    last = len(model.layers) - 1
    for i, spec in enumerate(model.layers):
        if isinstance(spec, (Dense, Conv2D)):
            W, b = model.params[i]["W"], model.params[i]["b"]
            if quantized:
                t1, t2 = model.theta[i]
                W = quantize(W, t1, t2, model.eps_zero, rounding)
                b = quantize(b, t1, t2, model.eps_zero, rounding)
            if isinstance(spec, Dense):
                x = T.add(T.matmul(x, W), b)
            else:
                x = T.add(T.conv2d(x, W, spec.stride, spec.pad), T.reshape(b, (1, -1, 1, 1)))
        elif isinstance(spec, BatchNorm):
            x = _bn_forward(model, i, x, training, quantized, rounding, update_stats)
        elif isinstance(spec, MaxPool):
            x = T.maxpool2d(x, spec.k, spec.stride)
        elif isinstance(spec, Flatten):
            x = T.flatten(x)
        elif isinstance(spec, Dropout):
            if training and spec.p > 0:
                if i not in masks:
                    if rng is None:
                        raise ValueError("train-mode dropout needs an rng")
                    masks[i] = T.dropout_mask(x.shape, spec.p, rng)
                x = T.dropout(x, spec.p, training=True, mask=masks[i])
        elif isinstance(spec, Activation):
            if spec.kind == "softmax":
                if not (logits and i == last):
                    x = T.softmax(x, axis=-1)
            elif spec.kind == "sigmoid":
                if not (logits and i == last):
                    x = T.sigmoid(x)
            elif spec.kind == "relu":
                x = T.relu(x)
            else:
                x = T.tanh(x)
    return x


def forward_teacher(model: Model, x, mode: str = "eval", rng: Optional[SeededRng] = None,
                    masks: Optional[dict] = None, logits: bool = False) -> Tensor:
    return forward(model, x, mode, rng, quantized=False, masks=masks, logits=logits)


def forward_student(model: Model, x, mode: str = "eval", rng: Optional[SeededRng] = None,
                    masks: Optional[dict] = None, logits: bool = False,
                    rounding: str = "nearest") -> Tensor:
    return forward(model, x, mode, rng, quantized=True, masks=masks, logits=logits, rounding=rounding)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def _scaled(n: int, scale: float) -> int:
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    return max(1, math.ceil(n * scale - 1e-9))


def build_lenet_small(scale: float = 1.0, seed: int = 0, eps_zero: float = DEFAULT_EPS_ZERO) -> Model:
    """Two 5x5 'same' conv layers (16, 36 filters) with 2x2 pooling, then fc 128 and fc 10."""
    c1, c2, h = _scaled(16, scale), _scaled(36, scale), _scaled(128, scale)
    layers = [
        Conv2D(1, c1, 5, 5, 1, 2), MaxPool(2, 2), Activation("relu"),
        Conv2D(c1, c2, 5, 5, 1, 2), MaxPool(2, 2), Activation("relu"),
        Flatten(),
        Dense(c2 * 7 * 7, h), Activation("relu"),
        Dense(h, 10), Activation("softmax"),
    ]
    return Model(layers, (1, 28, 28), seed=seed, eps_zero=eps_zero)


VGG16_D = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def build_vgg16(scale: float = 1.0, seed: int = 0, eps_zero: float = DEFAULT_EPS_ZERO,
                dropout_p: float = 0.4, num_classes: int = 10) -> Model:
    """VGG-16 configuration D for 3x32x32 inputs with batchnorm + relu after each conv.

    Dropout follows conv layers 2, 4, ..., 12.
    """
    layers: list = []
    in_ch, n_conv = 3, 0
    for v in VGG16_D:
        if v == "M":
            layers.append(MaxPool(2, 2))
            continue
        out = _scaled(v, scale)
        n_conv += 1
        layers += [Conv2D(in_ch, out, 3, 3, 1, 1), BatchNorm(out), Activation("relu")]
        if n_conv % 2 == 0 and n_conv <= 12:
            layers.append(Dropout(dropout_p))
        in_ch = out
    fc = _scaled(512, scale)
    layers += [Flatten(), Dense(in_ch, fc), Activation("relu"), Dense(fc, fc), Activation("relu"),
               Dense(fc, num_classes), Activation("softmax")]
    return Model(layers, (3, 32, 32), seed=seed, eps_zero=eps_zero)


def build_mlp(in_features: int, hidden: tuple = (32,), classes: int = 2, seed: int = 0,
              eps_zero: float = DEFAULT_EPS_ZERO, activation: str = "relu") -> Model:
    """Small fully connected classifier for flat inputs (synthetic-data runs and tests)."""
    layers: list = [Flatten()]
    d = in_features
    for h in hidden:
        layers += [Dense(d, h), Activation(activation)]
        d = h
    layers += [Dense(d, classes), Activation("softmax")]
    return Model(layers, (1, 1, in_features), seed=seed, eps_zero=eps_zero)


@dataclass
class VaeModel:
    encoder: Model
    mean_head: Model
    logvar_head: Model
    decoder: Model
    latent_dim: int

    @property
    def parts(self) -> list[tuple[str, Model]]:
        return [("encoder", self.encoder), ("mean", self.mean_head),
                ("logvar", self.logvar_head), ("decoder", self.decoder)]

    def weight_tensors(self) -> list[Tensor]:
        return [t for _, m in self.parts for t in m.weight_tensors()]

    def theta_tensors(self) -> list[Tensor]:
        return [t for _, m in self.parts for t in m.theta_tensors()]

    def parameter_count(self) -> int:
        return sum(m.parameter_count() for _, m in self.parts)

    def quantize_layers(self) -> list[QuantizedLayer]:
        return [q for _, m in self.parts for q in m.quantize_layers()]

    def zero_grad(self) -> None:
        for _, m in self.parts:
            m.zero_grad()


def _rename(model: Model, names: list[str]) -> Model:
    for i, name in zip(model.param_layers, names):
        model.names[i] = name
    return model


def build_vae(scale: float = 1.0, latent_dim: int = 10, seed: int = 0,
              eps_zero: float = DEFAULT_EPS_ZERO) -> VaeModel:
    """Encoder 512-384-256 (tanh), mean/logvar heads, decoder 256-384-512 (tanh) + 784 sigmoid."""
    enc_w = [_scaled(n, scale) for n in (512, 384, 256)]
    dec_w = list(reversed(enc_w))
    enc_layers: list = [Flatten()]
    d = 784
    for h in enc_w:
        enc_layers += [Dense(d, h), Activation("tanh")]
        d = h
    encoder = _rename(Model(enc_layers, (1, 28, 28), seed=seed, eps_zero=eps_zero), ["fc1", "fc2", "fc3"])
    mean_head = _rename(Model([Dense(d, latent_dim)], (d,), seed=seed + 1, eps_zero=eps_zero), ["mean"])
    logvar_head = _rename(Model([Dense(d, latent_dim)], (d,), seed=seed + 2, eps_zero=eps_zero), ["logvar"])
    dec_layers: list = []
    d = latent_dim
    for h in dec_w:
        dec_layers += [Dense(d, h), Activation("tanh")]
        d = h
    dec_layers += [Dense(d, 784), Activation("sigmoid")]
    decoder = _rename(Model(dec_layers, (latent_dim,), seed=seed + 3, eps_zero=eps_zero),
                      ["fc4", "fc5", "fc6", "fc7"])
    return VaeModel(encoder, mean_head, logvar_head, decoder, latent_dim)


def vae_forward(vae: VaeModel, x, rng: Optional[SeededRng] = None, quantized: bool = False,
                mode: str = "train", noise: Optional[np.ndarray] = None, logits: bool = False,
                rounding: str = "nearest"):
    """Returns ``(recon, mu, logvar)``; recon is pixel probabilities (logits if asked).

    z = mu + exp(0.5 * logvar) * n with n ~ N(0, 1) drawn from ``rng`` unless
    ``noise`` is supplied; with neither, z = mu.
    """
    h = forward(vae.encoder, x, mode, rng, quantized, rounding=rounding)
    mu = forward(vae.mean_head, h, mode, rng, quantized, rounding=rounding)
    logvar = forward(vae.logvar_head, h, mode, rng, quantized, rounding=rounding)
    if noise is None and rng is not None:
        noise = rng.normal(mu.shape).astype(mu.data.dtype)
    if noise is None:
        z = mu
    else:
        z = T.add(mu, T.mul(T.exp(T.scale(logvar, 0.5)), Tensor(noise)))
    recon = forward(vae.decoder, z, mode, rng, quantized, logits=logits, rounding=rounding)
    return recon, mu, logvar


def count_parameters(layers: list, input_shape: tuple) -> int:
    """Analytic parameter count of a layer list."""
    total, shape = 0, tuple(input_shape)
    for spec in layers:
        if isinstance(spec, Dense):
            total += spec.in_features * spec.out_features + spec.out_features
        elif isinstance(spec, Conv2D):
            total += spec.out_ch * spec.in_ch * spec.kh * spec.kw + spec.out_ch
        elif isinstance(spec, BatchNorm):
            total += 2 * spec.ch
        shape = output_shape(spec, shape)
    return total
