"""Inference executor whose work scales with activation density.

``dense`` mode runs every layer as a compiled gather loop over (output
position, kernel tap, input channel) and executes every MAC the layer
formula counts, padding taps included; it is the control arm.

``zero_skip`` mode first compacts each sample's nonzero activations with a
branch-free pass, then scatters only those through their kernel taps, so zero
operands (and padding) cost no multiply-accumulates. Operands that are not
post-ReLU activations, such as the raw network input, always take the dense
path. Kernels return the number of MACs they executed so the executor doubles
as an instrumented MAC counter.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import tensor as T
from .models import ActivationTrace, ModelSpec, TraceEntry

MODES = ("dense", "zero_skip")


@njit(cache=True)
def _compact(row, idx):
    cnt = 0
    for i in range(row.size):
        idx[cnt] = i
        cnt += row[i] != 0
    return cnt


@njit(cache=True)
def _conv_scatter(x, w, stride, pad, out):
    n_b, c_in, h, wd = x.shape
    kh, kw, _, c_out = w.shape
    oh, ow = out.shape[1], out.shape[2]
    wf = w.reshape(kh * kw * c_in, c_out)
    idx = np.empty(c_in * h * wd, dtype=np.int64)
    executed = 0
    out[:] = 0.0
    for n in range(n_b):
        row = x[n].ravel()
        of = out[n].reshape(oh * ow, c_out)
        cnt = _compact(row, idx)
        for j in range(cnt):
            flat = idx[j]
            a = row[flat]
            c = flat // (h * wd)
            iy = (flat // wd) % h
            ix = flat % wd
            for ky in range(kh):
                ty = iy + pad - ky
                if ty < 0:
                    break
                oy = ty // stride
                if oy * stride != ty or oy >= oh:
                    continue
                for kx in range(kw):
                    tx = ix + pad - kx
                    if tx < 0:
                        break
                    ox = tx // stride
                    if ox * stride != tx or ox >= ow:
                        continue
                    orow = of[oy * ow + ox]
                    wrow = wf[(ky * kw + kx) * c_in + c]
                    for co in range(c_out):
                        orow[co] += a * wrow[co]
                    executed += c_out
    return executed


@njit(cache=True)
def _depthwise_scatter(x, w, stride, pad, out):
    n_b, c_n, h, wd = x.shape
    _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    idx = np.empty(c_n * h * wd, dtype=np.int64)
    executed = 0
    out[:] = 0.0
    for n in range(n_b):
        row = x[n].ravel()
        cnt = _compact(row, idx)
        for j in range(cnt):
            flat = idx[j]
            a = row[flat]
            c = flat // (h * wd)
            iy = (flat // wd) % h
            ix = flat % wd
            for ky in range(kh):
                ty = iy + pad - ky
                if ty < 0:
                    break
                oy = ty // stride
                if oy * stride != ty or oy >= oh:
                    continue
                for kx in range(kw):
                    tx = ix + pad - kx
                    if tx < 0:
                        break
                    ox = tx // stride
                    if ox * stride != tx or ox >= ow:
                        continue
                    out[n, c, oy, ox] += a * w[c, ky, kx]
                    executed += 1
    return executed


@njit(cache=True)
def _conv_kernel(x, w, stride, pad, skip, out):
    n_b, c_in, h, wd = x.shape
    kh, kw, _, c_out = w.shape
    oh, ow = out.shape[2], out.shape[3]
    acc = np.zeros(c_out, dtype=np.float32)
    executed = 0
    for n in range(n_b):
        for oy in range(oh):
            for ox in range(ow):
                acc[:] = 0.0
                for ky in range(kh):
                    iy = oy * stride - pad + ky
                    for kx in range(kw):
                        ix = ox * stride - pad + kx
                        inside = 0 <= iy < h and 0 <= ix < wd
                        for c in range(c_in):
                            a = x[n, c, iy, ix] if inside else np.float32(0.0)
                            if skip and a == 0:
                                continue
                            for co in range(c_out):
                                acc[co] += a * w[ky, kx, c, co]
                            executed += c_out
                for co in range(c_out):
                    out[n, co, oy, ox] = acc[co]
    return executed


@njit(cache=True)
def _depthwise_kernel(x, w, stride, pad, skip, out):
    n_b, c_n, h, wd = x.shape
    _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    executed = 0
    for n in range(n_b):
        for c in range(c_n):
            for oy in range(oh):
                for ox in range(ow):
                    acc = np.float32(0.0)
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        for kx in range(kw):
                            ix = ox * stride - pad + kx
                            a = np.float32(0.0)
                            if 0 <= iy < h and 0 <= ix < wd:
                                a = x[n, c, iy, ix]
                            if skip and a == 0:
                                continue
                            acc += a * w[c, ky, kx]
                            executed += 1
                    out[n, c, oy, ox] = acc
    return executed


@njit(cache=True)
def _dense_kernel(x, w, skip, out):
    n_b, n_in = x.shape
    n_out = w.shape[1]
    executed = 0
    for n in range(n_b):
        for o in range(n_out):
            out[n, o] = 0.0
        for i in range(n_in):
            a = x[n, i]
            if skip and a == 0:
                continue
            for o in range(n_out):
                out[n, o] += a * w[i, o]
            executed += n_out
    return executed


@njit(cache=True)
def _pool_kernel(x, skip, out):
    n_b, c_n, h, wd = x.shape
    executed = 0
    for n in range(n_b):
        for c in range(c_n):
            acc = np.float32(0.0)
            for y in range(h):
                for xx in range(wd):
                    a = x[n, c, y, xx]
                    if skip and a == 0:
                        continue
                    acc += a
                    executed += 1
            out[n, c] = acc / np.float32(h * wd)
    return executed


class SparseExecutor:
    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = {k: T.as_tensor(v) for k, v in params.items()}
        # conv kernels laid out (kh, kw, c_in, c_out) so the innermost loop is contiguous
        self._w = {k: np.ascontiguousarray(v.transpose(2, 3, 1, 0))
                   for k, v in self.params.items() if v.ndim == 4}

    def _conv(self, key, l, x, skip):
        if skip:
            c, oh, ow = l.out_shape
            out = np.empty((len(x), oh, ow, c), dtype=T.DTYPE)
            macs = _conv_scatter(x, self._w[key], l.stride, l.padding, out)
            return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), macs
        out = np.empty((len(x),) + tuple(l.out_shape), dtype=T.DTYPE)
        macs = _conv_kernel(x, self._w[key], l.stride, l.padding, False, out)
        return out, macs

    def run(self, batch, mode: str = "zero_skip"):
        """Returns ``(logits, trace, executed_macs)`` for a batch."""
        if mode not in MODES:
            raise ValueError(f"executor mode must be one of {MODES}, got {mode!r}")
        x = T.as_tensor(batch)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ValueError(f"batch shape {x.shape} does not match model input {self.spec.input_shape}")
        zero_skip = mode == "zero_skip"
        dep = False     # current tensor derives from a ReLU output
        trace = ActivationTrace()
        macs = 0
        p = self.params
        for i, l in enumerate(self.spec.layers):
            skip = zero_skip and dep
            m = 0
            if l.kind in ("conv", "pointwise_conv"):
                x, m = self._conv(f"{i}.w", l, x, skip)
                x = T.add_channel_bias(x, p[f"{i}.b"])
                dep = False
            elif l.kind == "depthwise_conv":
                out = np.empty((len(x),) + tuple(l.out_shape), dtype=T.DTYPE)
                kernel = _depthwise_scatter if skip else _depthwise_kernel
                m = kernel(x, p[f"{i}.w"], l.stride, l.padding, out) if skip else \
                    kernel(x, p[f"{i}.w"], l.stride, l.padding, False, out)
                x = T.add_channel_bias(out, p[f"{i}.b"])
                dep = False
            elif l.kind == "residual_block":
                h, m1 = self._conv(f"{i}.w1", l, x, skip)
                h = T.relu(T.add_channel_bias(h, p[f"{i}.b1"]))
                s, m2 = self._conv(f"{i}.w2", l, h, zero_skip)
                out = T.relu(T.add_channel_bias(s, p[f"{i}.b2"]) + x)
                trace.entries += [TraceEntry(i, f"{i}.inner", h), TraceEntry(i, f"{i}.out", out)]
                x, m, dep = out, m1 + m2, True
            elif l.kind == "relu":
                x = T.relu(x)
                trace.entries.append(TraceEntry(i, str(i), x))
                dep = True
            elif l.kind == "global_avg_pool":
                out = np.empty(x.shape[:2], dtype=T.DTYPE)
                m = _pool_kernel(x, skip, out)
                x = out
            elif l.kind == "flatten":
                x = np.ascontiguousarray(x.reshape(len(x), -1))
            elif l.kind == "dense":
                out = np.empty((len(x), l.out_channels), dtype=T.DTYPE)
                m = _dense_kernel(x, p[f"{i}.w"], skip, out)
                x = out + p[f"{i}.b"]
                dep = False
            macs += int(m)
        return x, trace, macs
