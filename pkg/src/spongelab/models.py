"""Desk-scale classifier presets with traced forward and backward passes.

Two presets stand in for the architectures under attack: a depthwise-separable
stack (``m1``) and a small residual network (``m2``). Parameters are a flat
``{"<layer>.<name>": array}`` dict so the trainer, quantizer and serializer can
all walk them the same way.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T

LAYER_KINDS = (
    "dense", "conv", "depthwise_conv", "pointwise_conv", "residual_block",
    "relu", "global_avg_pool", "flatten",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple
    out_shape: tuple
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv", "depthwise_conv", "pointwise_conv", "residual_block")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    classes: int
    layers: tuple

    def __post_init__(self):
        validate_spec(self)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "layers": [
                {**asdict(l), "in_shape": list(l.in_shape), "out_shape": list(l.out_shape)}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = tuple(
            LayerSpec(**{**l, "in_shape": tuple(l["in_shape"]), "out_shape": tuple(l["out_shape"])})
            for l in d["layers"]
        )
        return cls(d["name"], tuple(d["input_shape"]), int(d["classes"]), layers)

    @property
    def relu_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "relu":
                names.append(str(i))
            elif layer.kind == "residual_block":
                names += [f"{i}.inner", f"{i}.out"]
        return names


def _expected_out_shape(layer: LayerSpec) -> tuple:
    s = layer.in_shape
    if layer.kind in ("relu",):
        return s
    if layer.kind == "flatten":
        return (int(np.prod(s)),)
    if layer.kind == "global_avg_pool":
        return (s[0],)
    if layer.kind == "dense":
        if s != (layer.in_channels,):
            raise ValueError(f"dense expects input ({layer.in_channels},), got {s}")
        return (layer.out_channels,)
    c, h, w = s
    if layer.in_channels != c:
        raise ValueError(f"{layer.kind}: declared {layer.in_channels} input channels, got {c}")
    oh = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
    ow = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
    if layer.kind == "depthwise_conv":
        if layer.out_channels != c:
            raise ValueError("depthwise_conv must keep the channel count")
        return (c, oh, ow)
    if layer.kind == "pointwise_conv" and layer.kernel != 1:
        raise ValueError("pointwise_conv must use a 1x1 kernel")
    if layer.kind == "residual_block":
        if layer.out_channels != c or (oh, ow) != (h, w):
            raise ValueError("residual_block skip path shape must match its main path")
    return (layer.out_channels, oh, ow)


def validate_spec(spec: ModelSpec) -> None:
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if layer.kind not in LAYER_KINDS:
            raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
        if tuple(layer.in_shape) != shape:
            raise ValueError(f"layer {i} ({layer.kind}): input shape {layer.in_shape} != {shape}")
        out = _expected_out_shape(layer)
        if tuple(layer.out_shape) != out:
            raise ValueError(f"layer {i} ({layer.kind}): declared output {layer.out_shape} != {out}")
        shape = out
    if shape != (spec.classes,):
        raise ValueError(f"final layer emits {shape}, expected ({spec.classes},) logits")


class _Stack:
    def __init__(self, input_shape):
        self.shape = tuple(input_shape)
        self.layers: list[LayerSpec] = []

    def add(self, kind, out_channels=0, kernel=0, stride=1, padding=0):
        in_ch = self.shape[0]
        layer = LayerSpec(kind, self.shape, (), in_ch, out_channels, kernel, stride, padding)
        out = _expected_out_shape(layer)
        layer = LayerSpec(kind, self.shape, out, in_ch, out_channels, kernel, stride, padding)
        self.layers.append(layer)
        self.shape = out
        return self


def _down_kernel(stride: int) -> tuple[int, int]:
    # 4x4/pad 1 keeps stride-2 extents integral on even inputs; 3x3/pad 1 otherwise
    return (4, 1) if stride == 2 else (3, 1)


def build_m1_micronet(input_shape=(3, 32, 32), classes: int = 10, stem: int = 16,
                      blocks: Sequence[tuple[int, int]] = ((32, 2), (64, 2), (64, 1))) -> ModelSpec:
    """Depthwise-separable stack: stem conv, then (depthwise, relu, pointwise, relu) blocks."""
    st = _Stack(input_shape)
    st.add("conv", stem, 3, 1, 1).add("relu")
    for channels, stride in blocks:
        k, p = _down_kernel(stride)
        st.add("depthwise_conv", st.shape[0], k, stride, p).add("relu")
        st.add("pointwise_conv", channels, 1, 1, 0).add("relu")
    st.add("global_avg_pool").add("dense", classes)
    return ModelSpec("m1_micronet", tuple(input_shape), classes, tuple(st.layers))


def build_m2_miniresnet(input_shape=(3, 32, 32), classes: int = 10, width: int = 32,
                        n_blocks: int = 2, stem_stride: int = 2) -> ModelSpec:
    """Stem conv followed by identity-skip residual blocks (conv, relu, conv, +skip, relu)."""
    st = _Stack(input_shape)
    k, p = _down_kernel(stem_stride)
    st.add("conv", width, k, stem_stride, p).add("relu")
    for _ in range(n_blocks):
        st.add("residual_block", width, 3, 1, 1)
    st.add("global_avg_pool").add("dense", classes)
    return ModelSpec("m2_miniresnet", tuple(input_shape), classes, tuple(st.layers))


PRESETS = {"m1": build_m1_micronet, "m2": build_m2_miniresnet}


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    shapes = {}
    for i, l in enumerate(spec.layers):
        if l.kind in ("conv", "pointwise_conv"):
            shapes[f"{i}.w"] = (l.out_channels, l.in_channels, l.kernel, l.kernel)
            shapes[f"{i}.b"] = (l.out_channels,)
        elif l.kind == "depthwise_conv":
            shapes[f"{i}.w"] = (l.in_channels, l.kernel, l.kernel)
            shapes[f"{i}.b"] = (l.in_channels,)
        elif l.kind == "residual_block":
            for j in (1, 2):
                shapes[f"{i}.w{j}"] = (l.out_channels, l.in_channels, l.kernel, l.kernel)
                shapes[f"{i}.b{j}"] = (l.out_channels,)
        elif l.kind == "dense":
            shapes[f"{i}.w"] = (l.in_channels, l.out_channels)
            shapes[f"{i}.b"] = (l.out_channels,)
    return shapes


def count_params(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if ".b" in name:
            params[name] = np.zeros(shape, dtype=T.DTYPE)
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)
    return params


@dataclass
class TraceEntry:
    layer: int
    name: str
    activation: np.ndarray

    @property
    def count(self) -> int:
        return int(self.activation.size)

    @property
    def nonzero(self) -> int:
        return int(np.count_nonzero(self.activation))


@dataclass
class ActivationTrace:
    entries: list = field(default_factory=list)

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> TraceEntry:
        return self.entries[i]

    @property
    def total_count(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def total_nonzero(self) -> int:
        return sum(e.nonzero for e in self.entries)

    def density(self) -> float:
        total = self.total_count
        return self.total_nonzero / total if total else 0.0


def _check_batch(spec: ModelSpec, batch) -> np.ndarray:
    x = T.as_tensor(batch)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"batch shape {x.shape} does not match model input {spec.input_shape}")
    return x


def _conv(l: LayerSpec, x, w, b):
    if l.kind == "depthwise_conv":
        y = T.depthwise_conv2d(x, w, l.stride, l.padding)
    else:
        y = T.conv2d(x, w, l.stride, l.padding)
    return T.add_channel_bias(y, b)


def _run(spec: ModelSpec, params, x, record: bool, keep_cache: bool):
    trace = ActivationTrace()
    caches = []
    for i, l in enumerate(spec.layers):
        cache = None
        if l.kind in ("conv", "pointwise_conv", "depthwise_conv"):
            cache = x
            x = _conv(l, x, params[f"{i}.w"], params[f"{i}.b"])
        elif l.kind == "relu":
            cache = x
            x = T.relu(x)
            if record:
                trace.entries.append(TraceEntry(i, str(i), x))
        elif l.kind == "residual_block":
            z1 = T.add_channel_bias(T.conv2d(x, params[f"{i}.w1"], l.stride, l.padding), params[f"{i}.b1"])
            h1 = T.relu(z1)
            s = T.add_channel_bias(T.conv2d(h1, params[f"{i}.w2"], l.stride, l.padding), params[f"{i}.b2"]) + x
            cache = (x, z1, h1, s)
            x = T.relu(s)
            if record:
                trace.entries.append(TraceEntry(i, f"{i}.inner", h1))
                trace.entries.append(TraceEntry(i, f"{i}.out", x))
        elif l.kind == "global_avg_pool":
            cache = x.shape
            x = T.global_avg_pool(x)
        elif l.kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif l.kind == "dense":
            cache = x
            x = T.dense(x, params[f"{i}.w"], params[f"{i}.b"])
        T.check_finite(x, f"layer {i} ({l.kind}) output")
        if keep_cache:
            caches.append(cache)
    return x, trace, caches


def forward(spec: ModelSpec, params, batch, record_trace: bool = False):
    """Logits for ``batch`` and, if requested, the post-ReLU activation trace."""
    x = _check_batch(spec, batch)
    logits, trace, _ = _run(spec, params, x, record_trace, False)
    return logits, trace


TracePenalty = Callable[[ActivationTrace], "tuple[float, list[np.ndarray]]"]


def backward(spec: ModelSpec, params, batch, labels, trace_penalty: TracePenalty | None = None):
    """Loss, parameter gradients and activation trace for one batch.

    ``trace_penalty`` maps the trace to ``(value, per-entry gradients)``; its
    value is added to the cross-entropy and its gradients are injected at the
    matching ReLU outputs.
    """
    x = _check_batch(spec, batch)
    logits, trace, caches = _run(spec, params, x, True, True)
    loss, g = T.softmax_cross_entropy(logits, labels)
    extra = {}
    if trace_penalty is not None:
        value, pgrads = trace_penalty(trace)
        loss += float(value)
        extra = {e.name: pg for e, pg in zip(trace.entries, pgrads) if pg is not None}
    grads = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        l = spec.layers[i]
        cache = caches[i]
        if l.kind == "dense":
            g, grads[f"{i}.w"], grads[f"{i}.b"] = T.dense_backward(cache, params[f"{i}.w"], g)
        elif l.kind in ("flatten", "global_avg_pool"):
            g = g.reshape(cache) if l.kind == "flatten" else T.global_avg_pool_backward(cache, g)
        elif l.kind == "relu":
            if str(i) in extra:
                g = g + extra[str(i)]
            g = T.relu_backward(cache, g)
        elif l.kind in ("conv", "pointwise_conv", "depthwise_conv"):
            grads[f"{i}.b"] = T.channel_bias_backward(g)
            bw = T.depthwise_backward if l.kind == "depthwise_conv" else T.conv2d_backward
            g, grads[f"{i}.w"] = bw(cache, params[f"{i}.w"], g, l.stride, l.padding)
        elif l.kind == "residual_block":
            x_in, z1, h1, s = cache
            if f"{i}.out" in extra:
                g = g + extra[f"{i}.out"]
            gs = T.relu_backward(s, g)
            grads[f"{i}.b2"] = T.channel_bias_backward(gs)
            g_h1, grads[f"{i}.w2"] = T.conv2d_backward(h1, params[f"{i}.w2"], gs, l.stride, l.padding)
            if f"{i}.inner" in extra:
                g_h1 = g_h1 + extra[f"{i}.inner"]
            g_z1 = T.relu_backward(z1, g_h1)
            grads[f"{i}.b1"] = T.channel_bias_backward(g_z1)
            g_x, grads[f"{i}.w1"] = T.conv2d_backward(x_in, params[f"{i}.w1"], g_z1, l.stride, l.padding)
            g = g_x + gs
    grads = {k: grads[k] for k in params}
    return loss, grads, trace


def predict(spec: ModelSpec, params, batch, batch_size: int = 256) -> np.ndarray:
    x = _check_batch(spec, batch)
    out = [forward(spec, params, x[i:i + batch_size])[0].argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
