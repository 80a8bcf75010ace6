"""``gtc`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import functools
import json
import os
import sys
from collections import Counter
from dataclasses import fields
from typing import Optional, Sequence

import numpy as np

from gtc import config as C
from gtc.data import DataFormatError, DatasetSplit, load_cifar10, load_mnist, synth_blobs
from gtc.layers import VaeModel, build_lenet_small, build_mlp, build_vae, build_vgg16, forward_student, vae_forward
from gtc.model_io import (FormatError, compression_ratio, load_checkpoint, load_gtcq, save_checkpoint, save_gtcq,
                          write_metrics_csv, write_summary_json)
from gtc.shift import (ExportError, bench, export_shift_model, export_shift_vae, shift_forward,
                       shift_model_from_layers, shift_vae_forward, shift_vae_from_layers)
from gtc.tensor import Tensor, no_grad
from gtc.train import TrainingDiverged, grid_search, grid_table_csv, layer_names, pm_quantize, train


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# building blocks shared with the estimators
# ---------------------------------------------------------------------------

def build_model(cfg: C.RunConfig, _train_cfg=None):
    if cfg.model == "lenet":
        return build_lenet_small(cfg.model_scale, cfg.seed, cfg.eps_zero)
    if cfg.model == "vgg16":
        return build_vgg16(cfg.model_scale, cfg.seed, cfg.eps_zero)
    if cfg.model == "vae":
        return build_vae(cfg.model_scale, cfg.latent_dim, cfg.seed, cfg.eps_zero)
    return build_mlp(cfg.synth_dim if cfg.dataset == "synth" else 784, (cfg.hidden,),
                     cfg.synth_classes if cfg.dataset == "synth" else 10, cfg.seed, cfg.eps_zero)


def input_shape(model) -> tuple:
    return model.encoder.input_shape if isinstance(model, VaeModel) else model.input_shape


def _fit(split: DatasetSplit, shape: tuple) -> DatasetSplit:
    x = split.images.data
    if tuple(x.shape[1:]) == tuple(shape):
        return split
    if int(np.prod(x.shape[1:])) != int(np.prod(shape)):
        raise UsageError(f"dataset samples of shape {x.shape[1:]} do not fit model input {shape}")
    return DatasetSplit(Tensor(x.reshape((len(x),) + tuple(shape))), split.labels, split.name)


def load_data(cfg: C.RunConfig, shape: tuple) -> tuple[DatasetSplit, DatasetSplit]:
    if cfg.dataset == "synth":
        img = tuple(shape) if int(np.prod(shape)) == cfg.synth_dim else None
        kw = dict(variance=cfg.synth_variance, image_shape=img)
        tr = synth_blobs(cfg.synth_classes, cfg.synth_per_class, cfg.synth_dim, cfg.seed, **kw)
        te = synth_blobs(cfg.synth_classes, max(cfg.synth_per_class // 4, 1), cfg.synth_dim, cfg.seed + 1, **kw)
        return _fit(tr, shape), _fit(te, shape)
    if not cfg.data_dir:
        raise UsageError(f"dataset {cfg.dataset} needs data_dir")
    if not os.path.isdir(cfg.data_dir):
        raise UsageError(f"data_dir {cfg.data_dir!r} does not exist")
    loader = load_mnist if cfg.dataset == "mnist" else load_cifar10
    try:
        tr, te = loader(cfg.data_dir, cfg.train_subset or None, cfg.test_subset or None)
    except FileNotFoundError as exc:
        raise UsageError(f"missing dataset file: {exc.filename}") from exc
    return _fit(tr, shape), _fit(te, shape)


def quantized_layers(model) -> list:
    return model.quantize_layers()


def run_training(cfg: C.RunConfig, resume_path: Optional[str] = None, log=None) -> dict:
    """Train per ``cfg`` and write metrics.csv, summary.json, checkpoint.zip and model.gtcq."""
    model = build_model(cfg)
    tr, te = load_data(cfg, input_shape(model))
    tcfg = cfg.train_config()
    resume = None
    if resume_path:
        resume = load_checkpoint(resume_path, model)
        saved = dict(resume["config"], out_dir=cfg.out_dir)
        if saved != cfg.as_dict():
            raise UsageError("checkpoint was written with a different config")
    os.makedirs(cfg.out_dir, exist_ok=True)
    start = resume["iteration"] if resume else 0
    stops = []
    if cfg.checkpoint_every:
        stops = [s for s in range(cfg.checkpoint_every, cfg.iters, cfg.checkpoint_every) if s > start]

    def on_record(rec):
        if log is not None:
            log(f"iter {rec.iter} loss {rec.total:.4f} teacher {rec.teacher_acc:.4f} "
                f"student {rec.student_acc:.4f} bits {rec.bits}")

    for stop in stops + [None]:
        res = train(model, tr, tcfg, te, resume=resume, stop_at=stop, on_record=on_record)
        resume = {"optimizer": res.state, "iteration": res.iteration, "records": res.records,
                  "evals": res.evals, "rng_state": res.rng_state}
        name = "checkpoint.zip" if stop is None else f"checkpoint_{stop}.zip"
        save_checkpoint(os.path.join(cfg.out_dir, name), model, res.state, res.iteration, res.rng_state,
                        cfg.as_dict(), res.records, res.evals)

    write_metrics_csv(res.records, os.path.join(cfg.out_dir, "metrics.csv"), len(layer_names(model)))
    summary = dict(res.summary)
    summary["config"] = cfg.as_dict()
    summary["config_hash"] = cfg.hash()
    if cfg.mode != "teacher_only":
        layers = quantized_layers(model)
        save_gtcq(layers, os.path.join(cfg.out_dir, "model.gtcq"))
        summary["compression"] = compression_ratio(layers)
    write_summary_json(summary, os.path.join(cfg.out_dir, "summary.json"))
    return summary


def shift_from_gtcq(model, layers):
    if isinstance(model, VaeModel):
        return shift_vae_from_layers(model, layers)
    return shift_model_from_layers(model, layers)


def export(model):
    return export_shift_vae(model) if isinstance(model, VaeModel) else export_shift_model(model)


def _has_batchnorm(model) -> bool:
    from gtc.layers import BatchNorm

    return not isinstance(model, VaeModel) and any(isinstance(s, BatchNorm) for s in model.layers)


def score(model, sm, split: DatasetSplit, batch_size: int = 500) -> dict:
    """Shift-engine score on ``split``; with a float model also the float student and an equality check."""
    is_vae = isinstance(model, VaeModel)
    x_all = split.images.data
    shift_sum = float_sum = 0.0
    equal = True
    for start in range(0, len(x_all), batch_size):
        xb = x_all[start:start + batch_size]
        out = shift_vae_forward(sm, xb) if is_vae else shift_forward(sm, xb)
        if model is not None:
            with no_grad():
                ref = (vae_forward(model, Tensor(xb), quantized=True, mode="eval")[0] if is_vae
                       else forward_student(model, Tensor(xb)))
            equal &= out.tobytes() == ref.data.tobytes()
            float_sum += _metric(ref.data, xb, split.labels[start:start + batch_size], is_vae) * len(xb)
        shift_sum += _metric(out, xb, split.labels[start:start + batch_size], is_vae) * len(xb)
    n = max(len(x_all), 1)
    key = "bce" if is_vae else "acc"
    out = {f"shift_{key}": shift_sum / n}
    if model is not None:
        out[f"float_{key}"] = float_sum / n
        out["outputs_identical"] = bool(equal)
    return out


def _metric(out: np.ndarray, x: np.ndarray, y: np.ndarray, is_vae: bool) -> float:
    if is_vae:
        p = np.clip(out.astype(np.float64), 1e-7, 1 - 1e-7)
        t = x.reshape(p.shape).astype(np.float64)
        return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))
    return float(np.mean(np.argmax(out, -1) == y))


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def shift_symbol(sign: int, e: Optional[int]) -> str:
    """Table notation: ->k right shift, <-k left shift, a leading ¬ flips the sign, ∅ is zero."""
    if sign == 0:
        return "∅"
    body = f"→{-e}" if e <= 0 else f"←{e}"
    return ("¬" if sign < 0 else "") + body


def inspect_lines(layers) -> list[str]:
    lines = [f"{'layer':<8} {'bits':>4} {'theta1':>9} {'theta2':>9}  shifts"]
    for q in layers:
        signs = q.signs.ravel()
        exps = q.exponents.ravel()
        hist = Counter((int(s), int(e) if s else None) for s, e in zip(signs, exps))
        order = sorted(hist, key=lambda k: (k[0] == 0, -(k[1] or 0), -k[0]))
        cells = ", ".join(f"{shift_symbol(s, e)}:{hist[(s, e)]}" for s, e in order)
        lines.append(f"{q.name:<8} {q.bits:>4} {q.theta1:>9.4f} {q.theta2:>9.4f}  [{cells}]")
    return lines


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (or the name of a bundled config)")
    group = p.add_argument_group("config overrides")
    for f in fields(C.RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper())


def _resolve_config(args, base: Optional[dict] = None) -> C.RunConfig:
    overrides = {}
    for f in fields(C.RunConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = C.coerce(f.name, raw)
    if args.config:
        return C.load_run_config(args.config, overrides)
    values = dict(base or {})
    values.update(overrides)
    return C.RunConfig(**values)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtc", description="Power-of-two weight training and shift inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and export it")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("quantize-pm", help="snap a trained teacher to powers of two")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score the shift engine on the test split")
    p.add_argument("--gtcq")
    p.add_argument("--checkpoint")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="op counts and timings of the shift and float engines")
    p.add_argument("--gtcq")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    _add_config_flags(p)

    p = sub.add_parser("grid", help="lambda1 x lambda2 grid of training runs")
    _add_config_flags(p)
    p.add_argument("--lambda1s", type=_float_list, required=True, help="comma-separated lambda1 values")
    p.add_argument("--lambda2s", type=_float_list, required=True, help="comma-separated lambda2 values")
    p.add_argument("--out", help="CSV output path (default: stdout)")

    p = sub.add_parser("inspect", help="per-layer bits, thetas and shift histograms of a GTCQ file")
    p.add_argument("gtcq")
    return parser


def _model_from_checkpoint(args):
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    import zipfile

    try:
        with zipfile.ZipFile(args.checkpoint) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{args.checkpoint} is not a checkpoint") from exc
    cfg = _resolve_config(args, meta["config"]) if hasattr(args, "cfg_model") else C.RunConfig(**meta["config"])
    model = build_model(cfg)
    load_checkpoint(args.checkpoint, model)
    return cfg, model


def _run(args, out) -> int:
    if args.command == "train":
        cfg = _resolve_config(args)
        log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
        summary = run_training(cfg, args.resume, log)
        out.write(json.dumps({k: summary[k] for k in ("avg_bits", "bits", "final_eval") if k in summary},
                             sort_keys=True) + "\n")
        return 0

    if args.command == "quantize-pm":
        _, model = _model_from_checkpoint(args)
        layers = pm_quantize(model)
        save_gtcq(layers, args.out)
        out.write(json.dumps(compression_ratio(layers), sort_keys=True) + "\n")
        return 0

    if args.command == "inspect":
        if not os.path.exists(args.gtcq):
            raise UsageError(f"file not found: {args.gtcq}")
        out.write("\n".join(inspect_lines(load_gtcq(args.gtcq))) + "\n")
        return 0

    if args.command == "eval":
        if not (args.gtcq or args.checkpoint):
            raise UsageError("eval needs --gtcq or --checkpoint")
        model = None
        if args.checkpoint:
            cfg, model = _model_from_checkpoint(args)
        else:
            cfg = _resolve_config(args)
        if args.gtcq:
            if not os.path.exists(args.gtcq):
                raise UsageError(f"file not found: {args.gtcq}")
            template = model if model is not None else build_model(cfg)
            if model is None and _has_batchnorm(template):
                raise UsageError("batchnorm constants are not stored in GTCQ; pass --checkpoint as well")
            sm = shift_from_gtcq(template, load_gtcq(args.gtcq))
        else:
            sm = export(model)
        _, te = load_data(cfg, input_shape(model if model is not None else build_model(cfg)))
        result = score(model, sm, te)
        out.write(json.dumps(result, sort_keys=True) + "\n")
        return 0 if result.get("outputs_identical", True) else 1

    if args.command == "bench":
        cfg, model = _model_from_checkpoint(args)
        sm = shift_from_gtcq(model, load_gtcq(args.gtcq)) if args.gtcq else export(model)
        _, te = load_data(cfg, input_shape(model))
        report = bench(sm, model, te.images.data[:args.batch], repeats=args.repeats)
        out.write(json.dumps(report, sort_keys=True) + "\n")
        return 0

    if args.command == "grid":
        cfg = _resolve_config(args)
        model = build_model(cfg)
        tr, te = load_data(cfg, input_shape(model))
        rows = grid_search(args.lambda1s, args.lambda2s, cfg.train_config(), tr,
                           functools.partial(build_model, cfg), te)
        text = grid_table_csv(rows)
        if args.out:
            from gtc.model_io import atomic_write

            atomic_write(args.out, text)
        else:
            out.write(text)
        return 0
    raise UsageError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args, out)
    except (UsageError, C.ConfigError) as exc:
        print(f"gtc: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FormatError, DataFormatError, ExportError, OSError, ValueError) as exc:
        print(f"gtc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
