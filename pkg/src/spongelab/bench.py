"""Repeated inference suites, statistics, vanilla/sponge comparison and reports."""

from __future__ import annotations

import csv
import gc
import json
import math
import os
import resource
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats

from . import energy
from .data import Dataset, subsample
from .deploy import QuantizedModel
from .energy import DeviceProfile
from .executor import MODES, SparseExecutor

SCHEMA = 1
ROW_METRICS = ("time_ms", "cpu_time_ms", "energy_nj", "accuracy", "density",
               "peak_rss_bytes", "battery_drain_percent")
# fields whose values depend on the machine and clock, not on the seed
WALLCLOCK_FIELDS = frozenset({
    "timestamp", "time_ms", "cpu_time_ms", "peak_rss_bytes", "inner_loops",
    "time_increase_pct", "welch_t", "welch_p", "time_significant",
})


@dataclass(frozen=True)
class BenchConfig:
    n_samples: int = 2000
    repetitions: int = 20
    profile: object = "s20-like"
    executor: str = "zero_skip"
    batch_size: int = 100
    seed: int = 0
    min_suite_ms: float = 50.0
    model: str | None = None

    def __post_init__(self):
        if self.n_samples < 1 or self.repetitions < 1 or self.batch_size < 1:
            raise ValueError("n_samples, repetitions and batch_size must be >= 1")
        if self.executor not in MODES:
            raise ValueError(f"executor must be one of {MODES}")

    def device(self) -> DeviceProfile:
        p = self.profile
        return p if isinstance(p, DeviceProfile) else energy.get_profile(p)


@dataclass
class RepRow:
    repetition: int
    time_ms: float
    cpu_time_ms: float
    energy_nj: float              # simulated, whole suite
    accuracy: float
    density: float
    peak_rss_bytes: int
    battery_drain_percent: float  # whole suite
    executed_macs: int
    skipped_macs: int
    nonzero: int
    activations: int
    latency_units: float


@dataclass
class Stat:
    mean: float
    std: float
    ci95: float       # half-width
    n: int


@dataclass
class BenchResult:
    setup: str
    profile: str
    executor: str
    n_samples: int
    repetitions: int
    inner_loops: int
    rows: list = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows], dtype=float)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.rows)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregates"] = {k: asdict(v) for k, v in self.aggregates.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchResult":
        names = {f.name for f in fields(cls)} - {"rows"}
        return cls(rows=[RepRow(**r) for r in d["rows"]], **{k: d[k] for k in names})


def aggregate(rows, metrics=ROW_METRICS) -> dict:
    """Mean, unbiased std and 95% t-interval half-width per metric."""
    out = {}
    for m in metrics:
        v = np.array([getattr(r, m) if not isinstance(r, dict) else r[m] for r in rows], dtype=float)
        n = len(v)
        std = float(v.std(ddof=1)) if n > 1 else 0.0
        half = float(stats.t.ppf(0.975, n - 1) * std / math.sqrt(n)) if n > 1 else 0.0
        out[m] = Stat(float(v.mean()), std, half, n)
    return out


def _as_float_model(model):
    spec, weights = model
    if isinstance(weights, QuantizedModel):
        return spec, weights.dequantized_params()
    return spec, weights


def _peak_rss() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def run_suites(models: dict, dataset: Dataset, config: BenchConfig, profiles=None) -> dict:
    """Benchmarks several models on the same samples with interleaved repetitions.

    ``models`` maps a setup label to ``(spec, params or QuantizedModel)``.
    Returns ``{label: {profile_name: BenchResult}}``; every profile re-prices the
    same measured repetitions. Repetitions run strictly one at a time.
    """
    profiles = list(profiles) if profiles else [config.device()]
    profiles = [p if isinstance(p, DeviceProfile) else energy.get_profile(p) for p in profiles]
    if config.n_samples > len(dataset):
        raise ValueError(f"dataset has {len(dataset)} samples, suite needs {config.n_samples}")
    setups = {}
    for label, model in models.items():
        spec, params = _as_float_model(model)
        if tuple(dataset.shape) != tuple(spec.input_shape):
            raise ValueError(f"{label}: dataset images {dataset.shape} do not fit model input {spec.input_shape}")
        setups[label] = (SparseExecutor(spec, params), energy.count_ops(spec))
    suite = dataset if config.n_samples == len(dataset) else subsample(dataset, config.n_samples, config.seed)
    chunks = [slice(i, min(i + config.batch_size, len(suite))) for i in range(0, len(suite), config.batch_size)]

    # warm-up pass: excluded from statistics, sizes the inner loop count
    warm = 0.0
    for ex, _ in setups.values():
        t0 = time.perf_counter()
        for c in chunks:
            ex.run(suite.images[c], config.executor)
        warm = max(warm, (time.perf_counter() - t0) * 1e3)
    inner = max(1, math.ceil(config.min_suite_ms / max(warm, 1e-6)))

    results = {label: {p.name: BenchResult(label, p.name, config.executor, len(suite),
                                           config.repetitions, inner) for p in profiles}
               for label in setups}
    labels = list(setups)
    for rep in range(config.repetitions):
        for label in (labels if rep % 2 == 0 else labels[::-1]):
            ex, opcount = setups[label]
            elapsed = 0.0
            correct = 0
            counts = []
            gc_was_enabled = gc.isenabled()
            gc.disable()
            cpu0 = time.process_time()
            try:
                for c in chunks:
                    images = suite.images[c]
                    # best of ``inner`` runs: preemption only ever adds time
                    best = math.inf
                    for _ in range(inner):
                        t0 = time.perf_counter()
                        logits, trace, _ = ex.run(images, config.executor)
                        best = min(best, time.perf_counter() - t0)
                    elapsed += best
                    correct += int((logits.argmax(axis=1) == suite.labels[c]).sum())
                    counts.append(energy.simulate_energy(opcount, trace, profiles[0]))
            finally:
                cpu = time.process_time() - cpu0
                if gc_was_enabled:
                    gc.enable()
            base = energy.merge_reports(counts, profiles[0])
            for p in profiles:
                rpt = energy.with_profile(base, p)
                results[label][p.name].rows.append(RepRow(
                    repetition=rep,
                    time_ms=elapsed * 1e3,
                    cpu_time_ms=cpu * 1e3 / inner,
                    energy_nj=rpt.energy_actual * rpt.n_inferences,
                    accuracy=correct / len(suite),
                    density=rpt.density,
                    peak_rss_bytes=_peak_rss(),
                    battery_drain_percent=rpt.battery_drain_percent,
                    executed_macs=rpt.executed_macs,
                    skipped_macs=rpt.skipped_macs,
                    nonzero=rpt.nonzero,
                    activations=rpt.activations,
                    latency_units=rpt.latency_units,
                ))
    return results


def run_suite(model, dataset: Dataset, config: BenchConfig, label: str = "model") -> BenchResult:
    res = run_suites({label: model}, dataset, config)
    return res[label][config.device().name]


@dataclass
class Comparison:
    vanilla: str
    sponge: str
    profile: str
    executor: str
    time_increase_pct: float
    battery_increase_pct: float
    energy_increase_pct: float
    latency_scale: float           # simulated zero-skip latency, vanilla = 1
    accuracy_delta_pts: float
    density_delta_pts: float
    welch_t: float
    welch_p: float
    time_significant: bool
    battery_welch_p: float = 1.0
    battery_significant: bool = False


def _pct(new: float, old: float) -> float:
    return 100.0 * (new - old) / old if old else 0.0


def _welch(a: np.ndarray, b: np.ndarray) -> tuple:
    """Welch t-test of ``a`` against ``b``; ``(t, p)``.

    Zero variance in both samples is the limit of the statistic: any difference
    in means gives |t| = inf and p = 0, equal means give t = 0 and p = 1.
    """
    if len(a) < 2 or len(b) < 2:
        return 0.0, 1.0
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        d = float(a.mean() - b.mean())
        return (math.copysign(math.inf, d), 0.0) if d else (0.0, 1.0)
    t, p = stats.ttest_ind(a, b, equal_var=False)
    return float(t), float(p)


def compare(vanilla: BenchResult, sponge: BenchResult, alpha: float = 0.05) -> Comparison:
    tv, ts = vanilla.values("time_ms"), sponge.values("time_ms")
    t, p = _welch(ts, tv)
    _, bp = _welch(sponge.values("battery_drain_percent"), vanilla.values("battery_drain_percent"))
    mean = lambda r, m: float(r.values(m).mean())
    return Comparison(
        vanilla=vanilla.setup, sponge=sponge.setup, profile=sponge.profile, executor=sponge.executor,
        time_increase_pct=_pct(ts.mean(), tv.mean()),
        battery_increase_pct=_pct(mean(sponge, "battery_drain_percent"), mean(vanilla, "battery_drain_percent")),
        energy_increase_pct=_pct(mean(sponge, "energy_nj"), mean(vanilla, "energy_nj")),
        latency_scale=mean(sponge, "latency_units") / mean(vanilla, "latency_units"),
        accuracy_delta_pts=100.0 * (mean(sponge, "accuracy") - mean(vanilla, "accuracy")),
        density_delta_pts=100.0 * (mean(sponge, "density") - mean(vanilla, "density")),
        welch_t=t, welch_p=p, time_significant=bool(p < alpha),
        battery_welch_p=bp, battery_significant=bool(bp < alpha),
    )


# -- reports -----------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _g(x) -> str:
    return "%.6g" % x


def _columns(rows) -> list:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
            for r in rows]


def summary_table(results, comparisons) -> str:
    rows = [["setup", "profile", "executor", "time_ms", "ci95", "energy_uJ/inf", "battery_%",
             "accuracy", "density"]]
    for r in results:
        a = r.aggregates
        rows.append([r.setup, r.profile, r.executor, _g(a["time_ms"].mean), _g(a["time_ms"].ci95),
                     _g(a["energy_nj"].mean / r.n_samples / 1e3), _g(a["battery_drain_percent"].mean),
                     _g(a["accuracy"].mean), _g(a["density"].mean)])
    lines = _columns(rows)
    if comparisons:
        rows = [["comparison", "profile", "executor", "time_%", "battery_%", "latency",
                 "acc_pts", "dens_pts", "time_p", "sig", "battery_p", "sig"]]
        for c in comparisons:
            rows.append([f"{c.sponge} vs {c.vanilla}", c.profile, c.executor, _g(c.time_increase_pct),
                         _g(c.battery_increase_pct), _g(c.latency_scale), _g(c.accuracy_delta_pts),
                         _g(c.density_delta_pts), _g(c.welch_p), "*" if c.time_significant else "-",
                         _g(c.battery_welch_p), "*" if c.battery_significant else "-"])
        lines += [""] + _columns(rows)
    return "\n".join(lines) + "\n"


def emit_report(results, comparisons, out_dir, header: dict | None = None,
                timestamp: str | None = None, echo: bool = True) -> dict:
    """Writes the JSON-lines log, one CSV per metric, and the summary table.

    Returns the written paths keyed by kind.
    """
    os.makedirs(out_dir, exist_ok=True)
    stamp = timestamp if timestamp is not None else time.strftime("%Y-%m-%dT%H:%M:%S%z")
    head = {"schema": SCHEMA, "type": "header", "timestamp": stamp,
            "battery_drain": "percent of a full battery per suite of n_samples inferences",
            **(header or {})}
    paths = {"jsonl": os.path.join(out_dir, "report.jsonl")}
    with open(paths["jsonl"], "w", encoding="utf-8") as f:
        f.write(_dumps(head) + "\n")
        for r in results:
            f.write(_dumps({"schema": SCHEMA, "type": "result", **r.to_dict()}) + "\n")
        for c in comparisons:
            f.write(_dumps({"schema": SCHEMA, "type": "comparison", **asdict(c)}) + "\n")
    for m in ROW_METRICS:
        path = os.path.join(out_dir, f"metric_{m}.csv")
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["setup", "profile", "executor", "repetition", m])
            for r in results:
                for row in r.rows:
                    w.writerow([r.setup, r.profile, r.executor, row.repetition, _g(getattr(row, m))])
        paths[f"csv_{m}"] = path
    table = summary_table(results, comparisons)
    paths["summary"] = os.path.join(out_dir, "summary.txt")
    with open(paths["summary"], "w", encoding="utf-8") as f:
        f.write(table)
    if echo:
        print(table, end="")
    return paths


def read_report(path):
    """Parses a JSON-lines report into ``(header, results, comparisons)``."""
    header, results, comparisons = None, [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if rec.get("schema") != SCHEMA:
                raise ValueError(f"{path}: unsupported report schema {rec.get('schema')}")
            kind = rec.pop("type")
            rec.pop("schema")
            if kind == "header":
                header = rec
            elif kind == "result":
                rec.pop("aggregates", None)
                results.append(BenchResult.from_dict(rec))
            elif kind == "comparison":
                comparisons.append(Comparison(**rec))
    return header, results, comparisons


def strip_wallclock(obj):
    """Drops clock- and machine-dependent fields from parsed report records."""
    if isinstance(obj, dict):
        return {k: strip_wallclock(v) for k, v in obj.items() if k not in WALLCLOCK_FIELDS}
    if isinstance(obj, list):
        return [strip_wallclock(v) for v in obj]
    return obj
