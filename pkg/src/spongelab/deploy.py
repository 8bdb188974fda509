"""Model porting: the ``.smod`` binary format and post-training 8-bit quantization.

Layout (all integers little-endian)::

    magic        4s   b"SMOD"
    version      u16  FORMAT_VERSION
    kind         u8   0 = float model, 1 = quantized model
    arch         u16 length + utf-8 bytes
    spec         u32 length + utf-8 JSON (sorted keys, compact separators)
    n_tensors    u32
    per tensor:
      name       u16 length + utf-8 bytes
      dtype      u8   0 = f32, 1 = i8 (affine 8-bit, stored as 0..255)
      ndim       u8
      dims       ndim x u32
      scale      f32  (1.0 for f32 tensors)
      zero_point u8   (0 for f32 tensors)
      nbytes     u32
      payload    nbytes raw bytes
    n_ranges     u32
    per range:   u16 length + utf-8 name, f32 min, f32 max

Quantized inference dequantizes weights once and runs float activations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import models
from .models import ModelSpec

MAGIC = b"SMOD"
FORMAT_VERSION = 1
KIND_FLOAT, KIND_QUANT = 0, 1
DTYPE_F32, DTYPE_I8 = 0, 1
QMAX = 255


class SmodError(ValueError):
    """Base class for ``.smod`` decoding failures."""


class BadMagic(SmodError):
    pass


class UnsupportedVersion(SmodError):
    pass


class TruncatedModel(SmodError):
    pass


class InvalidScale(SmodError):
    pass


@dataclass
class QTensor:
    q: np.ndarray          # uint8 codes, same shape as the source tensor
    scale: float
    zero_point: int

    def dequantize(self) -> np.ndarray:
        return ((self.q.astype(np.float32) - np.float32(self.zero_point)) * np.float32(self.scale)).astype(np.float32)


@dataclass
class QuantizedModel:
    spec: ModelSpec
    weights: dict                      # name -> QTensor
    biases: dict                       # name -> float32 array
    act_ranges: dict = field(default_factory=dict)   # trace name -> (min, max)

    def dequantized_params(self) -> dict:
        out = {}
        for name in models.param_shapes(self.spec):
            out[name] = self.weights[name].dequantize() if name in self.weights else self.biases[name]
        return out


def affine_params(x: np.ndarray) -> tuple[float, int]:
    """Per-tensor ``(scale, zero_point)`` over the range of ``x`` widened to include 0."""
    lo = min(float(np.min(x)), 0.0)
    hi = max(float(np.max(x)), 0.0)
    if hi == lo:
        return 1.0, 0
    scale = float(np.float32((hi - lo) / QMAX))
    # exact ratio, halves rounded up: [-1, 1] maps 0 to 128
    zero_point = int(np.clip(np.floor(-lo * QMAX / (hi - lo) + 0.5), 0, QMAX))
    return scale, zero_point


def quantize_tensor(x: np.ndarray) -> QTensor:
    scale, zp = affine_params(x)
    q = np.clip(np.rint(np.asarray(x, dtype=np.float64) / scale) + zp, 0, QMAX).astype(np.uint8)
    return QTensor(q, scale, zp)


def _is_weight(name: str) -> bool:
    return ".w" in name


def quantize_post_training(spec: ModelSpec, params: dict, calibration_batch) -> QuantizedModel:
    """8-bit affine weights per tensor; float biases; activation ranges from calibration."""
    if calibration_batch is None or len(calibration_batch) == 0:
        raise ValueError("calibration batch must be nonempty")
    weights = {k: quantize_tensor(v) for k, v in params.items() if _is_weight(k)}
    biases = {k: np.asarray(v, dtype=np.float32).copy() for k, v in params.items() if not _is_weight(k)}
    _, trace = models.forward(spec, params, calibration_batch, record_trace=True)
    ranges = {e.name: (float(e.activation.min()), float(e.activation.max())) for e in trace}
    return QuantizedModel(spec, weights, biases, ranges)


def quantized_forward(qmodel: QuantizedModel, batch, record_trace: bool = False):
    return models.forward(qmodel.spec, qmodel.dequantized_params(), batch, record_trace)


# -- serialization -----------------------------------------------------------

def _str(s: str, width: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<" + width, len(b)) + b


def _tensor_record(name: str, arr: np.ndarray, dtype: int, scale: float, zp: int) -> bytes:
    payload = np.ascontiguousarray(arr).astype("<f4" if dtype == DTYPE_F32 else "u1").tobytes()
    head = _str(name, "H") + struct.pack("<BB", dtype, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<fBI", scale, zp, len(payload))
    return head + payload


def export(spec: ModelSpec, model) -> bytes:
    """Serializes float ``params`` (dict) or a ``QuantizedModel``."""
    quant = isinstance(model, QuantizedModel)
    if quant and model.spec != spec:
        raise ValueError("quantized model belongs to a different spec")
    desc = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    out = [MAGIC, struct.pack("<HB", FORMAT_VERSION, KIND_QUANT if quant else KIND_FLOAT),
           _str(spec.name, "H"), _str(desc, "I")]
    names = list(models.param_shapes(spec))
    out.append(struct.pack("<I", len(names)))
    for name in names:
        if quant and name in model.weights:
            qt = model.weights[name]
            out.append(_tensor_record(name, qt.q, DTYPE_I8, qt.scale, qt.zero_point))
        else:
            arr = model.biases[name] if quant else model[name]
            out.append(_tensor_record(name, np.asarray(arr, dtype=np.float32), DTYPE_F32, 1.0, 0))
    ranges = model.act_ranges if quant else {}
    out.append(struct.pack("<I", len(ranges)))
    for name, (lo, hi) in ranges.items():
        out.append(_str(name, "H") + struct.pack("<ff", lo, hi))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedModel(f"truncated while reading {what} at byte {self.pos} "
                                 f"(need {n}, have {len(self.buf) - self.pos})")
        chunk = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def string(self, width: str, what: str) -> str:
        (n,) = self.unpack(width, what + " length")
        return self.take(n, what).decode("utf-8")


def import_model(data: bytes):
    """Inverse of ``export``: returns ``(spec, params)`` or ``(spec, QuantizedModel)``."""
    r = _Reader(data)
    if len(data) < len(MAGIC):
        raise TruncatedModel(f"stream of {len(data)} bytes is shorter than the magic")
    if r.take(4, "magic") != MAGIC:
        raise BadMagic("not an .smod stream (bad magic)")
    version, kind = r.unpack("HB", "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported .smod version {version} (expected {FORMAT_VERSION})")
    if kind not in (KIND_FLOAT, KIND_QUANT):
        raise SmodError(f"unknown model kind {kind}")
    arch = r.string("H", "architecture name")
    spec = ModelSpec.from_dict(json.loads(r.string("I", "spec descriptor")))
    if spec.name != arch:
        raise SmodError(f"architecture name {arch!r} disagrees with descriptor {spec.name!r}")
    (n_tensors,) = r.unpack("I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        name = r.string("H", "tensor name")
        dtype, ndim = r.unpack("BB", f"{name} header")
        dims = r.unpack(f"{ndim}I", f"{name} dims")
        scale, zp, nbytes = r.unpack("fBI", f"{name} quantization")
        if dtype not in (DTYPE_F32, DTYPE_I8):
            raise SmodError(f"{name}: unknown dtype tag {dtype}")
        if not scale > 0:
            raise InvalidScale(f"{name}: scale {scale} must be > 0")
        itemsize = 4 if dtype == DTYPE_F32 else 1
        if nbytes != itemsize * int(np.prod(dims, dtype=np.int64)):
            raise SmodError(f"{name}: payload size {nbytes} does not match dims {dims}")
        raw = r.take(nbytes, f"{name} payload")
        arr = np.frombuffer(raw, dtype="<f4" if dtype == DTYPE_F32 else "u1").reshape(dims)
        tensors[name] = (dtype, arr.astype(np.float32 if dtype == DTYPE_F32 else np.uint8), scale, zp)
    (n_ranges,) = r.unpack("I", "range count")
    ranges = {}
    for _ in range(n_ranges):
        name = r.string("H", "range name")
        ranges[name] = tuple(float(v) for v in r.unpack("ff", f"{name} range"))
    if r.pos != len(data):
        raise SmodError(f"{len(data) - r.pos} trailing bytes after model")
    expected = models.param_shapes(spec)
    if set(tensors) != set(expected) or any(tensors[k][1].shape != s for k, s in expected.items()):
        raise SmodError("tensor set does not match the model descriptor")
    if kind == KIND_FLOAT:
        return spec, {k: tensors[k][1] for k in expected}
    weights = {k: QTensor(a, s, z) for k, (d, a, s, z) in tensors.items() if d == DTYPE_I8}
    biases = {k: a for k, (d, a, s, z) in tensors.items() if d == DTYPE_F32}
    return spec, QuantizedModel(spec, weights, biases, ranges)


def save(path, spec: ModelSpec, model) -> None:
    with open(path, "wb") as f:
        f.write(export(spec, model))


def load(path):
    with open(path, "rb") as f:
        return import_model(f.read())
