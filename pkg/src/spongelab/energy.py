"""Zero-skipping accelerator cost model and battery drain.

Every multiply-accumulate whose activation operand is exactly zero is skipped.
Skipping is decided per activation element and removes all MACs fanning out of
that element, so executed/skipped counts follow exactly from an activation
trace and a static per-element fan-out map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ActivationTrace, ModelSpec
from .tensor import conv_output_size


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    e_mac: float            # nJ per executed MAC
    e_skip: float           # nJ per skipped MAC
    base_overhead: float    # nJ per inference
    battery_capacity: float  # mAh
    battery_voltage: float  # V
    tier: str = "high_end"

    def __post_init__(self):
        if not 0 <= self.e_skip < self.e_mac:
            raise ValueError(f"{self.name}: need 0 <= e_skip < e_mac")
        if self.base_overhead < 0:
            raise ValueError(f"{self.name}: base_overhead must be >= 0")
        if not (self.battery_capacity > 0 and self.battery_voltage > 0):
            raise ValueError(f"{self.name}: battery capacity and voltage must be > 0")
        if self.tier not in ("high_end", "low_end"):
            raise ValueError(f"{self.name}: tier must be high_end or low_end")

    @property
    def battery_joules(self) -> float:
        return self.battery_capacity * self.battery_voltage * 3.6


# Capacities are public device specs; energy coefficients are placeholders.
# With equal base_overhead o the low-end preset shows the larger relative
# increase for any density change iff o >= 0.147 * total MACs (in nJ), i.e. up
# to ~680k MACs per inference at 100 uJ.
PRESETS = {
    "s20-like": DeviceProfile("s20-like", e_mac=0.8, e_skip=0.05, base_overhead=1.0e5,
                              battery_capacity=3880, battery_voltage=3.85, tier="high_end"),
    "nexus5-like": DeviceProfile("nexus5-like", e_mac=2.0, e_skip=0.3, base_overhead=1.0e5,
                                 battery_capacity=2300, battery_voltage=3.8, tier="low_end"),
}


def get_profile(name: str) -> DeviceProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown device profile {name!r}; presets: {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class MacSite:
    """One MAC-bearing operation and where its activation operand comes from."""
    name: str
    layer: int
    kind: str               # conv | depthwise | dense | pool
    total: int              # MACs per inference
    dependent: int          # MACs whose operand is a post-ReLU activation
    source: int | None      # trace entry index feeding the operand
    pooled: bool = False    # operand is the spatial mean of the source entry
    in_shape: tuple = ()
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def fanout(self) -> np.ndarray:
        """MACs contributed by each operand element, shaped like one operand sample."""
        if self.kind in ("dense", "pool"):
            per = self.out_channels if self.kind == "dense" else 1
            return np.full(self.in_shape, per, dtype=np.int64)
        c, h, w = self.in_shape
        cy = _axis_cover(h, self.kernel, self.stride, self.padding)
        cx = _axis_cover(w, self.kernel, self.stride, self.padding)
        per = self.out_channels if self.kind == "conv" else 1
        return np.broadcast_to(per * np.outer(cy, cx), (c, h, w)).astype(np.int64)


def _axis_cover(size: int, kernel: int, stride: int, padding: int) -> np.ndarray:
    """How many (output, kernel tap) pairs read each input coordinate along one axis."""
    out = conv_output_size(size, kernel, stride, padding)
    cover = np.zeros(size, dtype=np.int64)
    for o in range(out):
        for k in range(kernel):
            y = o * stride - padding + k
            if 0 <= y < size:
                cover[y] += 1
    return cover


@dataclass(frozen=True)
class OpCount:
    sites: tuple

    @property
    def total(self) -> int:
        return sum(s.total for s in self.sites)

    @property
    def dependent(self) -> int:
        return sum(s.dependent for s in self.sites)


def count_ops(spec: ModelSpec, input_shape=None) -> OpCount:
    """Static per-inference MAC counts for every site of ``spec``."""
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        raise ValueError(f"input shape {input_shape} does not match model {spec.input_shape}")
    sites = []
    producer = None     # trace index of the current tensor, None for raw/opaque values
    pooled = False
    n_trace = 0

    def conv_site(name, i, l, kind, src):
        c, _, _ = l.in_shape
        co, oh, ow = l.out_shape
        per_out = l.kernel * l.kernel * (c if kind == "conv" else 1)
        total = oh * ow * co * per_out
        return MacSite(name, i, kind, total, total if src is not None else 0, src, False,
                       tuple(l.in_shape), co, l.kernel, l.stride, l.padding)

    for i, l in enumerate(spec.layers):
        if l.kind in ("conv", "pointwise_conv", "depthwise_conv"):
            kind = "depthwise" if l.kind == "depthwise_conv" else "conv"
            sites.append(conv_site(str(i), i, l, kind, producer))
            producer = None
        elif l.kind == "residual_block":
            sites.append(conv_site(f"{i}.conv1", i, l, "conv", producer))
            sites.append(conv_site(f"{i}.conv2", i, l, "conv", n_trace))
            producer = n_trace + 1
            n_trace += 2
        elif l.kind == "relu":
            producer = n_trace
            n_trace += 1
            pooled = False
        elif l.kind == "global_avg_pool":
            total = int(np.prod(l.in_shape))
            sites.append(MacSite(str(i), i, "pool", total, total if producer is not None else 0,
                                 producer, False, tuple(l.in_shape), l.in_shape[0]))
            pooled = True
        elif l.kind == "flatten":
            pass
        elif l.kind == "dense":
            total = l.in_channels * l.out_channels
            sites.append(MacSite(str(i), i, "dense", total, total if producer is not None else 0,
                                 producer, pooled, tuple(l.in_shape), l.out_channels))
            producer = None
            pooled = False
    for s in sites:
        # taps landing in zero padding have no source element and are never executed
        if s.source is not None and int(s.fanout().sum()) > s.total:
            raise AssertionError(f"site {s.name}: fan-out map exceeds {s.total} MACs")
    return OpCount(tuple(sites))


@dataclass
class SiteCount:
    executed: int
    skipped: int


def mac_counts(opcount: OpCount, trace: ActivationTrace) -> tuple[int, dict]:
    """Batch size and per-site executed/skipped MAC totals for ``trace``."""
    if not len(trace):
        raise ValueError("empty activation trace")
    n = len(trace[0].activation)
    out = {}
    for s in opcount.sites:
        fixed = n * (s.total - s.dependent)
        if s.source is None:
            out[s.name] = SiteCount(fixed, 0)
            continue
        if s.source >= len(trace):
            raise ValueError(f"site {s.name} reads trace entry {s.source}, trace has {len(trace)}")
        a = trace[s.source].activation
        if s.pooled:
            mask = (a.reshape(n, a.shape[1], -1) != 0).any(axis=2)
        else:
            mask = a != 0
            if a[0].size == int(np.prod(s.in_shape)):
                mask = mask.reshape((n,) + s.in_shape)
        if mask.shape[1:] != s.in_shape:
            raise ValueError(f"site {s.name}: trace entry {s.source} has shape {mask.shape[1:]}, "
                             f"expected {s.in_shape}")
        executed = int((mask * s.fanout()).sum())
        out[s.name] = SiteCount(fixed + executed, n * s.dependent - executed)
    return n, out


def measure_density(trace: ActivationTrace) -> tuple[dict, float]:
    """Per-entry and overall fraction of nonzero activations."""
    per = {e.name: (e.nonzero / e.count if e.count else 0.0) for e in trace}
    return per, trace.density()


@dataclass
class EnergyReport:
    profile: str
    n_inferences: int
    executed_macs: int           # totals over the n inferences
    skipped_macs: int
    energy_actual: float         # nJ per inference
    energy_worst_case: float     # nJ per inference
    layer_density: dict = field(default_factory=dict)
    density: float = 0.0
    nonzero: int = 0
    activations: int = 0
    skip_cost_ratio: float = 0.0
    battery_drain_percent: float = 0.0
    battery_inferences: int = 0

    @property
    def energy_gap_ratio(self) -> float:
        return self.energy_actual / self.energy_worst_case

    @property
    def latency_units(self) -> float:
        """Per-inference time in executed-MAC units, skipped MACs weighted by e_skip/e_mac."""
        return (self.executed_macs + self.skip_cost_ratio * self.skipped_macs) / self.n_inferences


def battery_drain(energy_per_inference_nj: float, n_inferences: int, profile: DeviceProfile) -> float:
    """Percent of a full battery consumed by ``n_inferences`` inferences."""
    joules = energy_per_inference_nj * 1e-9 * n_inferences
    return 100.0 * joules / profile.battery_joules


def _build_report(profile, n, executed, skipped, nonzero, activations, layer_density,
                  battery_inferences=None) -> EnergyReport:
    actual = (executed * profile.e_mac + skipped * profile.e_skip) / n + profile.base_overhead
    worst = (executed + skipped) * profile.e_mac / n + profile.base_overhead
    battery_inferences = n if battery_inferences is None else battery_inferences
    return EnergyReport(profile.name, n, executed, skipped, actual, worst, layer_density,
                        nonzero / activations if activations else 0.0, nonzero, activations,
                        profile.e_skip / profile.e_mac,
                        battery_drain(actual, battery_inferences, profile), battery_inferences)


def simulate_energy(opcount: OpCount, trace: ActivationTrace, profile: DeviceProfile,
                    battery_inferences: int | None = None) -> EnergyReport:
    n, counts = mac_counts(opcount, trace)
    executed = sum(c.executed for c in counts.values())
    skipped = sum(c.skipped for c in counts.values())
    per, _ = measure_density(trace)
    return _build_report(profile, n, executed, skipped, trace.total_nonzero, trace.total_count,
                         per, battery_inferences)


def merge_reports(reports, profile: DeviceProfile, battery_inferences: int | None = None) -> EnergyReport:
    """Combines reports over disjoint batches into one report over all inferences."""
    reports = list(reports)
    n = sum(r.n_inferences for r in reports)
    layer = {}
    for name in reports[0].layer_density:
        num = sum(r.layer_density[name] * r.n_inferences for r in reports)
        layer[name] = num / n
    return _build_report(profile, n, sum(r.executed_macs for r in reports),
                         sum(r.skipped_macs for r in reports), sum(r.nonzero for r in reports),
                         sum(r.activations for r in reports), layer, battery_inferences)


def with_profile(report: EnergyReport, profile: DeviceProfile) -> EnergyReport:
    """Re-prices the MAC counts of ``report`` under another device profile."""
    return _build_report(profile, report.n_inferences, report.executed_macs, report.skipped_macs,
                         report.nonzero, report.activations, dict(report.layer_density),
                         report.battery_inferences)


def latency_scale(report: EnergyReport, baseline: EnergyReport) -> float:
    """Relative zero-skip latency of ``report`` with ``baseline`` normalised to 1."""
    return report.latency_units / baseline.latency_units
