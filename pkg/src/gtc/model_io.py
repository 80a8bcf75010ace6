"""GTCQ bit-packed models, training checkpoints and metrics files.

GTCQ layout (integers little-endian)::

    "GTCQ" | u16 version | u16 layer_count
    per layer:
        u8 name_len | name (UTF-8) | u8 rank | rank x u32 dims
        f32 theta1 | f32 theta2 | i16 m | u8 bits_reported | u8 code_width
        payload: ceil(n * (1 + c) / 8) bytes

Each weight is one sign bit (1 = negative) followed by a ``c``-bit code,
packed most-significant bit first. Code 0 is a zero weight; code ``v > 0``
is exponent ``m + v - 1``. ``c = ceil(log2(M - m + 2))``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import tempfile
import zipfile
from dataclasses import asdict
from typing import Optional, Sequence, Union

import numpy as np

from gtc.layers import Model, VaeModel
from gtc.quant import QuantizedLayer, code_width, layer_bits
from gtc.train import MetricsRecord, OptimizerState

MAGIC = b"GTCQ"
VERSION = 1
CHECKPOINT_FORMAT = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def atomic_write(path: str, data: Union[bytes, str]) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# GTCQ
# ---------------------------------------------------------------------------

def payload_bytes(n: int, c: int) -> int:
    return math.ceil(n * (1 + c) / 8)


def _encode_layer(q: QuantizedLayer) -> bytes:
    name = q.name.encode("utf-8")
    if len(name) > 255:
        raise FormatError(f"layer name longer than 255 bytes: {q.name!r}")
    shape = tuple(int(d) for d in q.shape)
    if len(shape) > 255 or any(d < 0 or d >= 1 << 32 for d in shape):
        raise FormatError(f"unsupported shape {shape}")
    c = code_width(q.m, q.M)
    m = 0 if q.m is None else q.m
    if not -(1 << 15) <= m < 1 << 15:
        raise FormatError(f"exponent {m} does not fit in 16 bits")
    if q.bits != layer_bits(q.m, q.M):
        raise FormatError(f"layer {q.name!r}: bits {q.bits} inconsistent with range [{q.m}, {q.M}]")
    signs = q.signs.ravel()
    exps = q.exponents.ravel().astype(np.int64)
    nz = signs != 0
    codes = np.where(nz, exps - m + 1, 0).astype(np.uint64)
    cols = np.empty((signs.size, 1 + c), dtype=np.uint8)
    cols[:, 0] = signs < 0
    for j in range(c):
        cols[:, 1 + j] = (codes >> np.uint64(c - 1 - j)) & np.uint64(1)
    payload = np.packbits(cols.ravel(), bitorder="big").tobytes()
    head = struct.pack("<B", len(name)) + name + struct.pack("<B", len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    head += struct.pack("<ffhBB", q.theta1, q.theta2, m, q.bits, c)
    return head + payload


def encode_gtcq(layers: Sequence[QuantizedLayer]) -> bytes:
    if len(layers) >= 1 << 16:
        raise FormatError("too many layers")
    return MAGIC + struct.pack("<HH", VERSION, len(layers)) + b"".join(_encode_layer(q) for q in layers)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated GTCQ data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_layer(r: _Reader) -> QuantizedLayer:
    (name_len,) = r.unpack("<B")
    try:
        name = r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("layer name is not valid UTF-8") from exc
    (rank,) = r.unpack("<B")
    shape = r.unpack(f"<{rank}I") if rank else ()
    theta1, theta2, m, bits, c = r.unpack("<ffhBB")
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = np.frombuffer(r.take(payload_bytes(n, c)), dtype=np.uint8)
    allbits = np.unpackbits(raw, bitorder="big")
    if allbits[n * (1 + c):].any():
        raise FormatError(f"layer {name!r}: nonzero padding bits")
    cols = allbits[:n * (1 + c)].reshape(n, 1 + c).astype(np.int64)
    neg = cols[:, 0].astype(bool)
    codes = np.zeros(n, dtype=np.int64)
    for j in range(c):
        codes = (codes << 1) | cols[:, 1 + j]
    if np.any(neg & (codes == 0)):
        raise FormatError(f"layer {name!r}: sign bit set on a zero weight")
    nz = codes > 0
    if nz.any():
        lo, hi = int(codes[nz].min()), int(codes[nz].max())
        qm, qM = m + lo - 1, m + hi - 1
        if lo != 1:
            raise FormatError(f"layer {name!r}: stored m={m} is not the smallest exponent")
    else:
        qm = qM = None
        if m != 0:
            raise FormatError(f"layer {name!r}: all-zero layer must store m=0")
    if c != code_width(qm, qM):
        raise FormatError(f"layer {name!r}: code width {c} does not match exponent range")
    if bits != layer_bits(qm, qM):
        raise FormatError(f"layer {name!r}: bits_reported {bits} does not match exponent range")
    signs = np.where(nz, np.where(neg, -1, 1), 0).astype(np.int8)
    exps = np.where(nz, codes + m - 1, 0).astype(np.int32)
    return QuantizedLayer(signs=signs.reshape(shape), exponents=exps.reshape(shape), m=qm, M=qM, bits=bits,
                          theta1=float(theta1), theta2=float(theta2), name=name, shape=tuple(shape))


def decode_gtcq(buf: bytes) -> list[QuantizedLayer]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad GTCQ magic")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported GTCQ version {version}")
    layers = [_decode_layer(r) for _ in range(count)]
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last layer")
    return layers


def save_gtcq(layers: Sequence[QuantizedLayer], path: str) -> int:
    data = encode_gtcq(layers)
    atomic_write(path, data)
    return len(data)


def load_gtcq(path: str) -> list[QuantizedLayer]:
    with open(path, "rb") as fh:
        return decode_gtcq(fh.read())


def compression_ratio(layers: Sequence[QuantizedLayer]) -> dict:
    """Float32 size over GTCQ size, for the payload alone and for the whole file."""
    n = sum(q.size for q in layers)
    payload = sum(payload_bytes(q.size, code_width(q.m, q.M)) for q in layers)
    file_bytes = len(encode_gtcq(layers))
    return {"parameters": n, "payload_bytes": payload, "file_bytes": file_bytes,
            "payload_ratio": 32.0 * n / (8.0 * payload), "file_ratio": 32.0 * n / (8.0 * file_bytes)}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _submodels(model) -> list[tuple[str, Model]]:
    if isinstance(model, VaeModel):
        return list(model.parts)
    return [("", model)]


def model_arrays(model) -> dict[str, np.ndarray]:
    out = {}
    for prefix, m in _submodels(model):
        pre = f"{prefix}/" if prefix else ""
        for i in m.param_layers:
            for k, t in m.params[i].items():
                out[f"{pre}{i}.{k}"] = t.data
            out[f"{pre}{i}.theta1"] = np.asarray(m.theta[i][0].data)
            out[f"{pre}{i}.theta2"] = np.asarray(m.theta[i][1].data)
            for k, a in m.running.get(i, {}).items():
                out[f"{pre}{i}.running_{k}"] = a
    return out


def _apply_arrays(model, arrays: dict) -> None:
    expected = model_arrays(model)
    if set(expected) != set(arrays):
        raise FormatError("checkpoint tensors do not match the model topology")
    for prefix, m in _submodels(model):
        pre = f"{prefix}/" if prefix else ""
        for i in m.param_layers:
            for k, t in m.params[i].items():
                t.data = _checked(arrays[f"{pre}{i}.{k}"], t.data)
            for j, key in enumerate(("theta1", "theta2")):
                m.theta[i][j].data = _checked(arrays[f"{pre}{i}.{key}"], np.asarray(m.theta[i][j].data))
            for k in list(m.running.get(i, {})):
                m.running[i][k] = _checked(arrays[f"{pre}{i}.running_{k}"], m.running[i][k])


def _checked(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    if new.shape != np.shape(old) or new.dtype != np.asarray(old).dtype:
        raise FormatError(f"tensor {new.shape}/{new.dtype} does not match {np.shape(old)}/{np.asarray(old).dtype}")
    return new.copy()


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(a), allow_pickle=False)
    return buf.getvalue()


def checkpoint_bytes(model, state: OptimizerState, iteration: int, rng_state: dict, config: dict,
                     records: Sequence[MetricsRecord] = (), evals: Sequence[dict] = ()) -> bytes:
    arrays = {f"model/{k}": v for k, v in model_arrays(model).items()}
    for j, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"opt/m{j}"] = m
        arrays[f"opt/v{j}"] = v
    meta = {
        "format": CHECKPOINT_FORMAT,
        "iteration": int(iteration),
        "optimizer_step": int(state.step),
        "optimizer_slots": len(state.m),
        "rng_state": rng_state,
        "config": config,
        "config_hash": config_hash(config),
        "records": [asdict(r) for r in records],
        "evals": list(evals),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        entries = [("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode("utf-8"))]
        entries += [(f"{k}.npy", _npy(v)) for k, v in sorted(arrays.items())]
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def save_checkpoint(path: str, model, state: OptimizerState, iteration: int, rng_state: dict,
                    config: dict, records: Sequence[MetricsRecord] = (), evals: Sequence[dict] = ()) -> None:
    atomic_write(path, checkpoint_bytes(model, state, iteration, rng_state, config, records, evals))


def load_checkpoint(path: str, model) -> dict:
    """Restore ``model`` in place and return the resume dict accepted by :func:`gtc.train.train`."""
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path} is not a checkpoint") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise FormatError("checkpoint has no meta.json") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"unsupported checkpoint format {meta.get('format')}")
        if config_hash(meta["config"]) != meta["config_hash"]:
            raise FormatError("checkpoint config hash mismatch")
        arrays = {}
        for name in zf.namelist():
            if name.startswith("model/"):
                arrays[name[len("model/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
        slots = meta["optimizer_slots"]
        ms = [np.load(io.BytesIO(zf.read(f"opt/m{j}.npy")), allow_pickle=False) for j in range(slots)]
        vs = [np.load(io.BytesIO(zf.read(f"opt/v{j}.npy")), allow_pickle=False) for j in range(slots)]
    _apply_arrays(model, arrays)
    return {
        "iteration": meta["iteration"],
        "optimizer": OptimizerState(meta["optimizer_step"], ms, vs),
        "rng_state": meta["rng_state"],
        "config": meta["config"],
        "config_hash": meta["config_hash"],
        "records": [MetricsRecord(**r) for r in meta["records"]],
        "evals": meta["evals"],
    }


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

BASE_COLUMNS = ["iter", "teacher_loss", "distill_loss", "bit_cost", "total", "teacher_acc",
                "student_acc", "lambda2"]


def metrics_header(n_layers: int) -> list[str]:
    cols = list(BASE_COLUMNS)
    for i in range(1, n_layers + 1):
        cols += [f"bits_l{i}", f"theta1_l{i}", f"theta2_l{i}"]
    return cols


def metrics_csv(records: Sequence[MetricsRecord], n_layers: Optional[int] = None) -> str:
    if n_layers is None:
        if not records:
            raise ValueError("n_layers is required for an empty metrics stream")
        n_layers = len(records[0].bits)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(n_layers))
    for r in records:
        if len(r.bits) != n_layers:
            raise ValueError("record layer count does not match the header")
        row = [r.iter] + [repr(float(getattr(r, k))) for k in BASE_COLUMNS[1:]]
        for b, t1, t2 in zip(r.bits, r.theta1, r.theta2):
            row += [int(b), repr(float(t1)), repr(float(t2))]
        w.writerow(row)
    return buf.getvalue()


def write_metrics_csv(records: Sequence[MetricsRecord], path: str, n_layers: Optional[int] = None) -> None:
    atomic_write(path, metrics_csv(records, n_layers))


def parse_metrics_csv(text: str) -> list[MetricsRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("metrics CSV has no header")
    header = rows[0]
    n_layers = (len(header) - len(BASE_COLUMNS)) // 3
    if header != metrics_header(n_layers):
        raise FormatError("unexpected metrics CSV header")
    out = []
    for row in rows[1:]:
        if len(row) != len(header):
            raise FormatError("metrics CSV row has the wrong number of fields")
        base = dict(zip(BASE_COLUMNS, row))
        rest = row[len(BASE_COLUMNS):]
        out.append(MetricsRecord(
            iter=int(base["iter"]), **{k: float(base[k]) for k in BASE_COLUMNS[1:]},
            bits=[int(v) for v in rest[0::3]], theta1=[float(v) for v in rest[1::3]],
            theta2=[float(v) for v in rest[2::3]]))
    return out


def read_metrics_csv(path: str) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_metrics_csv(fh.read())


def summary_json(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=2, default=_json_default) + "\n"


def write_summary_json(summary: dict, path: str) -> None:
    atomic_write(path, summary_json(summary))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
