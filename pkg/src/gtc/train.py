"""Joint teacher/student training with a learned bit penalty, plus the PM and STE baselines.

The objective minimised per step is

    L(teacher) + lambda1 * D(teacher, student) + lambda2 * sum_l 2**bits_l

where the student weights are the power-of-two quantization of the teacher
weights under per-layer thetas. Gradients w.r.t. W and theta update W and
theta respectively; the distillation term is not detached on the teacher side.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Union

import numpy as np

from gtc import tensor as T
from gtc.data import DatasetSplit, batch_indices
from gtc.layers import (BN_EPS, BatchNorm, Model, VaeModel, forward, forward_student, forward_teacher,
                        vae_forward)
from gtc.quant import QuantizedLayer, bit_cost_term, code_width, layer_bits, round_half_away, signum_eps
from gtc.tensor import SeededRng, Tensor, backward, no_grad

MODES = ("gtc", "ste", "ste_bit", "teacher_only")
PIXELS = 784


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lambda1: float = 0.8
    lambda2: float = 0.04
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    iters: int = 5000
    seed: int = 0
    anneal_every: int = 0
    anneal_factor: float = 1.0
    mode: str = "gtc"
    log_every: int = 50
    eval_every: int = 500
    kl_weight: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1 or self.iters < 0 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1, iters >= 0")
        if self.anneal_every and not 0 < self.anneal_factor < 1:
            raise ValueError("anneal_factor must be in (0, 1)")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], kind: str = "adam") -> "OptimizerState":
        if kind == "sgd":
            return cls()
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[Optional[np.ndarray]], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adam with bias correction; a missing gradient counts as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        if state.m[i].shape != p.data.shape:
            raise ValueError("optimizer state does not match parameter shape")
        state.m[i] = dt(beta1) * state.m[i] + dt(1 - beta1) * g
        state.v[i] = dt(beta2) * state.v[i] + dt(1 - beta2) * (g * g)
        mhat = state.m[i] / dt(c1)
        vhat = state.v[i] / dt(c2)
        p.data = np.asarray(p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps)), dtype=p.data.dtype)


def sgd_step(params: list[Tensor], grads: list[Optional[np.ndarray]], lr: float) -> None:
    for p, g in zip(params, grads):
        if g is not None:
            p.data = np.asarray(p.data - p.data.dtype.type(lr) * g, dtype=p.data.dtype)


def anneal_lambda2(cfg: TrainConfig, it: int) -> float:
    """lambda2 * factor ** floor(it / every); constant when annealing is off."""
    if not cfg.anneal_every:
        return cfg.lambda2
    return cfg.lambda2 * cfg.anneal_factor ** (it // cfg.anneal_every)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def task_loss(out: Tensor, target, kind: str = "ce", from_logits: Optional[bool] = None) -> Tensor:
    """Mean-over-batch task loss.

    ``ce``: ``out`` are logits and ``target`` class indices. ``bce``: ``out``
    are probabilities (or logits with ``from_logits=True``); per-sample loss is
    the mean over the remaining axes.
    """
    if kind == "ce":
        y = np.asarray(target, dtype=np.int64)
        k = out.shape[-1]
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"class index out of range for {k} classes")
        logp = T.log_softmax(out, axis=-1)
        onehot = np.zeros(out.shape, dtype=out.data.dtype)
        onehot[np.arange(len(y)), y] = 1
        return T.neg(T.mean(T.tsum(T.mul(logp, Tensor(onehot)), axis=-1)))
    if kind == "bce":
        t = Tensor(np.asarray(target.data if isinstance(target, Tensor) else target).reshape(out.shape))
        if from_logits:
            return _bce_logits(out, t)
        return _bce_probs(out, t)
    raise ValueError(f"unknown loss kind {kind!r}")


def _bce_logits(z: Tensor, t: Tensor) -> Tensor:
    # -[t log s(z) + (1-t) log(1-s(z))] = softplus(z) - t*z
    per = T.sub(T.softplus(z), T.mul(t, z))
    return T.mean(per)


def _bce_probs(p: Tensor, t: Tensor) -> Tensor:
    one = p.data.dtype.type(1)
    per = T.add(T.mul(t, T.log(p)), T.mul(T.sub(one, t), T.log(T.sub(one, p))))
    return T.neg(T.mean(per))


def distill_loss_supervised(teacher_logits: Tensor, student_logits: Tensor) -> Tensor:
    """Cross-entropy of the student softmax against the teacher softmax, mean over batch."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("teacher and student outputs differ in shape")
    pt = T.softmax(teacher_logits, axis=-1)
    ls = T.log_softmax(student_logits, axis=-1)
    return T.neg(T.mean(T.tsum(T.mul(pt, ls), axis=-1)))


def distill_loss_unsupervised(teacher_recon: Tensor, student_recon: Tensor) -> Tensor:
    """BCE of the student reconstruction against the teacher's as a soft target."""
    for r in (teacher_recon, student_recon):
        if np.any(r.data <= 0) or np.any(r.data >= 1):
            raise ValueError("reconstructions must lie strictly inside (0, 1)")
    return _bce_probs(student_recon, teacher_recon)


def distill_loss_unsupervised_logits(teacher_logits: Tensor, student_logits: Tensor) -> Tensor:
    """Same loss computed from pre-sigmoid outputs (numerically stable)."""
    return _bce_logits(student_logits, T.sigmoid(teacher_logits))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over batch of KL(N(mu, exp(logvar)) || N(0, 1))."""
    inner = T.sub(T.add(T.square(mu), T.exp(logvar)), T.add(logvar, 1.0))
    return T.scale(T.mean(T.tsum(inner, axis=-1)), 0.5)


def bit_cost_groups(model: Union[Model, VaeModel]):
    models = [m for _, m in model.parts] if isinstance(model, VaeModel) else [model]
    groups = []
    for m in models:
        for i in m.param_layers:
            p = m.params[i]
            if isinstance(m.layers[i], BatchNorm):
                var = Tensor(m.running[i]["var"])
                tensors = [T.div(p["gamma"], T.sqrt(T.add(var, BN_EPS)))]
            else:
                tensors = [p["W"], p["b"]]
            groups.append((tensors, *m.theta[i]))
    return groups


def model_bit_cost(model, rounding: str = "nearest") -> Tensor:
    eps = model.encoder.eps_zero if isinstance(model, VaeModel) else model.eps_zero
    return bit_cost_term(bit_cost_groups(model), eps, rounding)


def total_objective(teacher_out: Tensor, student_out: Tensor, target, model, cfg: TrainConfig,
                    lambda2: Optional[float] = None, kind: str = "ce", rounding: str = "nearest"):
    """Return ``(total, L, D, B)`` for one batch of paired outputs.

    Classifier outputs are logits; for ``kind="bce"`` they are reconstruction
    logits and ``target`` the input pixels.
    """
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    if kind == "ce":
        L = task_loss(teacher_out, target, "ce")
        D = distill_loss_supervised(teacher_out, student_out)
    else:
        L = task_loss(teacher_out, target, "bce", from_logits=True)
        D = distill_loss_unsupervised_logits(teacher_out, student_out)
    B = model_bit_cost(model, rounding)
    total = L
    if cfg.lambda1:
        total = T.add(total, T.scale(D, cfg.lambda1))
    if lam2:
        total = T.add(total, T.scale(B, lam2))
    return total, L, D, B


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    iter: int
    teacher_loss: float
    distill_loss: float
    bit_cost: float
    total: float
    teacher_acc: float
    student_acc: float
    lambda2: float
    bits: list
    theta1: list
    theta2: list


def quantized_layers(model) -> list[QuantizedLayer]:
    return model.quantize_layers()


def avg_bits(model_or_layers) -> float:
    """Unweighted mean of per-layer bits."""
    layers = _as_layers(model_or_layers)
    if not layers:
        raise ValueError("no quantized layers")
    return float(sum(q.bits for q in layers) / len(layers))


def weighted_avg_bits(model_or_layers) -> float:
    """Parameter-weighted mean of per-layer bits."""
    layers = _as_layers(model_or_layers)
    n = sum(q.size for q in layers)
    return float(sum(q.bits * q.size for q in layers) / n)


def _as_layers(obj) -> list[QuantizedLayer]:
    if isinstance(obj, (Model, VaeModel)):
        return obj.quantize_layers()
    return list(obj)


def _theta_values(model) -> tuple[list, list]:
    models = [m for _, m in model.parts] if isinstance(model, VaeModel) else [model]
    t1 = [float(m.theta[i][0].data) for m in models for i in m.param_layers]
    t2 = [float(m.theta[i][1].data) for m in models for i in m.param_layers]
    return t1, t2


def layer_names(model) -> list[str]:
    models = [m for _, m in model.parts] if isinstance(model, VaeModel) else [model]
    return [m.names[i] for m in models for i in m.param_layers]


# ---------------------------------------------------------------------------
# post-mortem quantization
# ---------------------------------------------------------------------------

def pm_quantize(model) -> list[QuantizedLayer]:
    """Snap every weight of a trained model to the nearest power of two in the log domain."""
    models = [m for _, m in model.parts] if isinstance(model, VaeModel) else [model]
    out = []
    for m in models:
        for i in m.param_layers:
            flat = np.concatenate([np.asarray(t.data, np.float32).ravel() for t in m.quantized_tensors(i)])
            out.append(pm_quantize_array(flat, m.eps_zero, name=m.names[i]))
    return out


def pm_quantize_array(w: np.ndarray, eps_zero: float, name: str = "") -> QuantizedLayer:
    w = np.asarray(w, dtype=np.float32)
    signs = np.asarray(signum_eps(w, eps_zero), dtype=np.int8).reshape(w.shape)
    exps = np.zeros(w.shape, dtype=np.int32)
    nz = signs != 0
    exps[nz] = round_half_away(np.log2(np.abs(w[nz].astype(np.float64)))).astype(np.int32)
    if nz.any():
        m, M = int(exps[nz].min()), int(exps[nz].max())
    else:
        m = M = None
    return QuantizedLayer(signs=signs, exponents=exps, m=m, M=M, bits=layer_bits(m, M),
                          theta1=0.0, theta2=1.0, name=name, shape=tuple(w.shape))


PM_STORAGE_BITS = 9


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    records: list
    evals: list
    summary: dict
    state: OptimizerState
    iteration: int
    rng_state: dict


def trainable_params(model, mode: str) -> list[Tensor]:
    params = list(model.weight_tensors())
    if mode == "gtc":
        params += model.theta_tensors()
    return params


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == y)) if len(y) else 0.0


def _bce_value(logits: np.ndarray, target: np.ndarray) -> float:
    z = logits.astype(np.float64)
    t = target.reshape(z.shape).astype(np.float64)
    return float(np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))


def _step(model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, lam2: float, rng: SeededRng) -> dict:
    """One forward/backward pass; returns scalar diagnostics and the total loss tensor."""
    is_vae = isinstance(model, VaeModel)
    kind = "bce" if is_vae else "ce"
    xt = Tensor(x)

    def run(quantized: bool, noise=None, masks=None):
        if is_vae:
            out, mu, lv = vae_forward(model, xt, quantized=quantized, mode="train", noise=noise, logits=True)
            return out, mu, lv
        return forward(model, xt, "train", rng, quantized=quantized, masks=masks, logits=True), None, None

    noise = rng.normal((x.shape[0], model.latent_dim)).astype(x.dtype) if is_vae else None
    masks: dict = {}
    diag = {}
    if cfg.mode == "gtc":
        t_out, t_mu, t_lv = run(False, noise, masks)
        s_out, _, _ = run(True, noise, masks)
        total, L, D, B = total_objective(t_out, s_out, y if not is_vae else x, model, cfg, lam2, kind)
        if is_vae:
            kl = kl_divergence(t_mu, t_lv)
            L = T.add(L, T.scale(kl, cfg.kl_weight / PIXELS))
            total = T.add(total, T.scale(kl, cfg.kl_weight / PIXELS))
        diag.update(L=L.item(), D=D.item(), B=B.item())
    elif cfg.mode == "teacher_only":
        t_out, t_mu, t_lv = run(False, noise, masks)
        L = task_loss(t_out, y if not is_vae else x, kind, from_logits=True)
        if is_vae:
            L = T.add(L, T.scale(kl_divergence(t_mu, t_lv), cfg.kl_weight / PIXELS))
        total = L
        with no_grad():
            s_out, _, _ = run(True, noise, masks)
            B = model_bit_cost(model)
            D = (distill_loss_unsupervised_logits(t_out, s_out) if is_vae
                 else distill_loss_supervised(t_out, s_out))
        diag.update(L=L.item(), D=D.item(), B=B.item())
    else:
        s_out, s_mu, s_lv = run(True, noise, masks)
        Ls = task_loss(s_out, y if not is_vae else x, kind, from_logits=True)
        if is_vae:
            Ls = T.add(Ls, T.scale(kl_divergence(s_mu, s_lv), cfg.kl_weight / PIXELS))
        B = model_bit_cost(model)
        total = Ls
        if cfg.mode == "ste_bit" and lam2:
            total = T.add(total, T.scale(B, lam2))
        with no_grad():
            t_out, _, _ = run(False, noise, masks)
            L = task_loss(t_out, y if not is_vae else x, kind, from_logits=True)
            D = (distill_loss_unsupervised_logits(t_out, s_out) if is_vae
                 else distill_loss_supervised(t_out, s_out))
        diag.update(L=L.item(), D=D.item(), B=B.item())
    diag["total"] = total.item()
    if is_vae:
        diag["t_acc"] = _bce_value(t_out.data, x)
        diag["s_acc"] = _bce_value(s_out.data, x)
    else:
        diag["t_acc"] = _accuracy(t_out.data, y)
        diag["s_acc"] = _accuracy(s_out.data, y)
    diag["loss"] = total
    return diag


def evaluate(model, split: DatasetSplit, batch_size: int = 500) -> dict:
    """Eval-mode teacher and student scores on a split (accuracy, or BCE for a VAE)."""
    is_vae = isinstance(model, VaeModel)
    x_all = split.images.data
    n = len(x_all)
    t_sum = s_sum = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            xb = x_all[start:start + batch_size]
            if is_vae:
                t, _, _ = vae_forward(model, Tensor(xb), mode="eval", logits=True)
                s, _, _ = vae_forward(model, Tensor(xb), mode="eval", quantized=True, logits=True)
                t_sum += _bce_value(t.data, xb) * len(xb)
                s_sum += _bce_value(s.data, xb) * len(xb)
            else:
                yb = split.labels[start:start + batch_size]
                t = forward_teacher(model, Tensor(xb), "eval", logits=True)
                s = forward_student(model, Tensor(xb), "eval", logits=True)
                t_sum += float(np.sum(np.argmax(t.data, -1) == yb))
                s_sum += float(np.sum(np.argmax(s.data, -1) == yb))
    key = "bce" if is_vae else "acc"
    return {f"teacher_{key}": t_sum / max(n, 1), f"student_{key}": s_sum / max(n, 1)}


def _record(model, it: int, window: dict, lam2: float) -> MetricsRecord:
    n = window["n"]
    layers = model.quantize_layers()
    t1, t2 = _theta_values(model)
    bits = [q.bits for q in layers]
    return MetricsRecord(
        iter=it, teacher_loss=window["L"] / n, distill_loss=window["D"] / n,
        bit_cost=float(sum(2.0 ** b for b in bits)), total=window["total"] / n,
        teacher_acc=window["t_acc"] / n, student_acc=window["s_acc"] / n, lambda2=lam2,
        bits=bits, theta1=t1, theta2=t2)


def _empty_window() -> dict:
    return {"n": 0, "L": 0.0, "D": 0.0, "B": 0.0, "total": 0.0, "t_acc": 0.0, "s_acc": 0.0}


def train(model, data: DatasetSplit, cfg: TrainConfig, test: Optional[DatasetSplit] = None,
          resume: Optional[dict] = None, stop_at: Optional[int] = None,
          on_record: Optional[Callable[[MetricsRecord], None]] = None) -> TrainResult:
    """Train ``model`` in place and return the metrics stream plus a summary.

    ``resume`` is a dict produced by :func:`gtc.model_io.load_checkpoint`
    (already applied to ``model``); ``stop_at`` ends the run early at that
    iteration, which must be a logging boundary, leaving a resumable state.
    """
    params = trainable_params(model, cfg.mode)
    if resume is not None:
        state = resume["optimizer"]
        start = resume["iteration"]
        records = list(resume.get("records", []))
        evals = list(resume.get("evals", []))
        rng = SeededRng(cfg.seed, stream=1)
        rng.state = resume["rng_state"]
    else:
        state = OptimizerState.for_params(params, cfg.optimizer)
        start = 0
        records, evals = [], []
        rng = SeededRng(cfg.seed, stream=1)
    end = cfg.iters if stop_at is None else min(stop_at, cfg.iters)
    if stop_at is not None and stop_at % cfg.log_every:
        raise ValueError("stop_at must be a multiple of log_every")

    x_all, y_all = data.images.data, data.labels
    n = len(x_all)
    if n == 0:
        raise ValueError("empty training split")
    window = _empty_window()
    for it in range(start, end):
        idx = batch_indices(n, cfg.batch_size, cfg.seed, it)
        xb, yb = x_all[idx], y_all[idx]
        lam2 = anneal_lambda2(cfg, it)
        model.zero_grad()
        try:
            diag = _step(model, xb, yb, cfg, lam2, rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite value at iteration {it}: {exc}") from exc
        if not math.isfinite(diag["total"]):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        backward(diag.pop("loss"))
        grads = [p.grad for p in params]
        for g in grads:
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient at iteration {it}")
        if cfg.optimizer == "adam":
            adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        else:
            state.step += 1
            sgd_step(params, grads, cfg.lr)
        for k in ("L", "D", "B", "total", "t_acc", "s_acc"):
            window[k] += diag[k]
        window["n"] += 1
        done = it + 1
        if done % cfg.log_every == 0 or done == cfg.iters:
            rec = _record(model, done, window, lam2)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            window = _empty_window()
        if test is not None and cfg.eval_every and done % cfg.eval_every == 0:
            evals.append({"iter": done, **evaluate(model, test)})

    iteration = end
    summary = summarize(model, cfg, records, evals, test) if iteration == cfg.iters else {}
    return TrainResult(model, records, evals, summary, state, iteration, rng.state)


def summarize(model, cfg: TrainConfig, records: list, evals: list,
              test: Optional[DatasetSplit] = None) -> dict:
    layers = model.quantize_layers()
    t1, t2 = _theta_values(model)
    n_params = sum(q.size for q in layers)
    payload = sum(math.ceil(q.size * (1 + code_width(q.m, q.M)) / 8) for q in layers)
    out = {
        "iterations": records[-1].iter if records else 0,
        "layers": [q.name for q in layers],
        "bits": [q.bits for q in layers],
        "theta1": t1,
        "theta2": t2,
        "avg_bits": avg_bits(layers),
        "weighted_avg_bits": weighted_avg_bits(layers),
        "bit_cost": float(sum(2.0 ** q.bits for q in layers)),
        "parameter_count": n_params,
        "payload_compression_ratio": 32.0 * n_params / (8.0 * payload),
        "evals": evals,
    }
    if test is not None:
        out["final_eval"] = evaluate(model, test)
    return out


def ste_train(model, data: DatasetSplit, cfg: TrainConfig, with_bit_penalty: bool,
              test: Optional[DatasetSplit] = None) -> TrainResult:
    """Train the quantized model directly (identity thetas, no distillation)."""
    return train(model, data, replace(cfg, mode="ste_bit" if with_bit_penalty else "ste"), test)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

def _grid_cell(args):
    factory, data, test, cfg = args
    res = train(factory(cfg), data, cfg, test)
    ev = res.summary.get("final_eval") or {}
    acc = ev.get("student_acc", ev.get("student_bce", res.records[-1].student_acc if res.records else 0.0))
    return {"lambda1": cfg.lambda1, "lambda2": cfg.lambda2, "acc": acc,
            "avg_bits": res.summary["avg_bits"], "weighted_avg_bits": res.summary["weighted_avg_bits"]}


def grid_search(lambda1s: Iterable[float], lambda2s: Iterable[float], cfg: TrainConfig,
                data: DatasetSplit, factory: Callable[[TrainConfig], object],
                test: Optional[DatasetSplit] = None, workers: Optional[int] = None) -> list[dict]:
    """One run per (lambda1, lambda2) cell, all with the same seed; rows ordered lambda2-major."""
    cells = [replace(cfg, lambda1=float(l1), lambda2=float(l2)) for l2 in lambda2s for l1 in lambda1s]
    if workers is None:
        workers = int(os.environ.get("GTC_THREADS", "1") or 1)
    jobs = [(factory, data, test, c) for c in cells]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_grid_cell, jobs))
    return [_grid_cell(j) for j in jobs]


def grid_table_csv(rows: list[dict]) -> str:
    """Two stacked blocks (avg bits, accuracy): rows lambda2, columns lambda1."""
    l1s = sorted({r["lambda1"] for r in rows})
    l2s = sorted({r["lambda2"] for r in rows})
    cell = {(r["lambda1"], r["lambda2"]): r for r in rows}
    lines = []
    for key in ("avg_bits", "acc"):
        lines.append(",".join([f"{key}:lambda2/lambda1"] + [repr(l) for l in l1s]))
        for l2 in l2s:
            lines.append(",".join([repr(l2)] + [repr(cell[(l1, l2)][key]) if (l1, l2) in cell else ""
                                                  for l1 in l1s]))
    return "\n".join(lines) + "\n"


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
