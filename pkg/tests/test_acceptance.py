"""Acceptance gates. Each test prints one ``criterion N: PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
repeated in the pytest terminal summary.
"""

import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from spongelab import bench, config, deploy, energy, models, pipeline, training
from spongelab import tensor as T
from spongelab.cli import cli_main

from cases import random_model
from gradcheck import GRAD_MODELS, end_to_end_gradient_error, op_gradient_cases
from oracles import naive_mac_counts
from verdicts import record

SEEDS = range(5)
ARCHS = ("m1", "m2")


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    op_worst = 0.0
    for seed in range(10):
        for name, analytic, numeric in op_gradient_cases(seed):
            op_worst = max(op_worst, T.relative_error(analytic, numeric))
    e2e_worst, excl_worst = 0.0, 0.0
    for arch, build in GRAD_MODELS.items():
        spec = build()
        for seed in range(10):
            # odd seeds also differentiate through the sponge penalty
            err, excl = end_to_end_gradient_error(spec, seed, penalty_sigma=1e-2 if seed % 2 else None)
            e2e_worst, excl_worst = max(e2e_worst, err), max(excl_worst, excl)
    dt = time.perf_counter() - t0
    ok = op_worst <= 1e-3 and e2e_worst <= 1e-2 and excl_worst <= 0.2 and dt <= 30
    assert record(1, ok, f"ops worst rel err {op_worst:.2e} (<= 1e-3), end-to-end {e2e_worst:.2e} "
                         f"(<= 1e-2), kink-excluded {excl_worst:.1%}, 10 seeds, {dt:.1f}s (<= 30s)")


def test_criterion_2_energy_oracle():
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(10):
        spec, params, x = random_model(seed, batch=3)
        _, trace = models.forward(spec, params, x, record_trace=True)
        rpt = energy.simulate_energy(energy.count_ops(spec), trace, energy.get_profile("s20-like"))
        got, want = (rpt.executed_macs, rpt.skipped_macs), naive_mac_counts(spec, params, x)
        if got != want:
            mismatches.append((seed, got, want))
    dt = time.perf_counter() - t0
    ok = not mismatches and dt <= 10
    assert record(2, ok, f"10 random models, {len(mismatches)} count mismatches {mismatches}, {dt:.1f}s (<= 10s)")


# -- training-based criteria share one set of runs -------------------------------------------

@pytest.fixture(scope="module")
def trained():
    """5 seeds x both architectures on the quickstart task, grid-searched sponge arm."""
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        cfg = config.quickstart(seed)
        split = pipeline.load_data(cfg)
        for arch in ARCHS:
            spec, arms, _ = pipeline.train_arms(cfg, arch, split)
            runs[(arch, seed)] = (spec, arms, split)
    return runs, time.perf_counter() - t0


def test_criterion_3_sponge_effect(trained):
    runs, dt = trained
    parts, ok = [], dt <= 300
    for arch in ARCHS:
        dens_gain = [runs[(arch, s)][1]["sponge"][2].final_density - runs[(arch, s)][1]["vanilla"][2].final_density
                     for s in SEEDS]
        acc_drop = [100 * (runs[(arch, s)][1]["vanilla"][2].final_accuracy
                           - runs[(arch, s)][1]["sponge"][2].final_accuracy) for s in SEEDS]
        g, d = float(np.median(dens_gain)), float(np.median(acc_drop))
        ok &= g >= 0.10 and d <= 2.0
        parts.append(f"{arch} median density gain {g:+.3f} (>= 0.10), median accuracy drop {d:.2f} pts (<= 2)")
    assert record(3, ok, "; ".join(parts) + f"; 5 seeds, 30 epochs, {dt:.0f}s (<= 300s)")


@pytest.fixture(scope="module")
def benched(trained):
    """Seed-0 models of both architectures, 200 samples x 20 repetitions, both executors."""
    runs, _ = trained
    cfg = config.quickstart(0)
    profiles = [cfg.device(p) for p in ("s20-like", "nexus5-like")]
    out = {}
    t0 = time.perf_counter()
    for arch in ARCHS:
        spec, arms, (_, test) = runs[(arch, 0)]
        for executor in ("zero_skip", "dense"):
            bc = replace(cfg.bench, n_samples=200, repetitions=20, executor=executor)
            res = bench.run_suites({a: (spec, arms[a][1]) for a in ("vanilla", "sponge")}, test, bc, profiles)
            for p in profiles:
                out[(arch, executor, p.name)] = (res["vanilla"][p.name], res["sponge"][p.name],
                                                 bench.compare(res["vanilla"][p.name], res["sponge"][p.name]))
    return out, time.perf_counter() - t0


def test_criterion_4_latency_and_battery(benched):
    out, dt = benched
    parts, ok = [], dt <= 180
    for arch in ARCHS:
        c = out[(arch, "zero_skip", "s20-like")][2]
        ctrl = out[(arch, "dense", "s20-like")][2]
        ok &= (c.time_increase_pct > 0 and c.time_significant and c.battery_increase_pct > 0
               and c.battery_significant and not ctrl.time_significant)
        parts.append(f"{arch} zero_skip time {c.time_increase_pct:+.1f}% (p={c.welch_p:.2g}) "
                     f"battery {c.battery_increase_pct:+.1f}% (p={c.battery_welch_p:.2g}), "
                     f"dense control time {ctrl.time_increase_pct:+.1f}% (p={ctrl.welch_p:.2g})")
    assert record(4, ok, "; ".join(parts) + f"; reference magnitudes +13% time, +15% battery; {dt:.0f}s (<= 180s)")


def test_criterion_5_device_tier(benched):
    out, _ = benched
    parts, ok = [], True
    for arch in ARCHS:
        van_hi, sp_hi, c_hi = out[(arch, "zero_skip", "s20-like")]
        van_lo, sp_lo, c_lo = out[(arch, "zero_skip", "nexus5-like")]
        drains = [(r_lo.values("battery_drain_percent").mean(), r_hi.values("battery_drain_percent").mean())
                  for r_lo, r_hi in ((van_lo, van_hi), (sp_lo, sp_hi))]
        ok &= c_lo.battery_increase_pct >= c_hi.battery_increase_pct and all(lo > hi for lo, hi in drains)
        parts.append(f"{arch} increase nexus5-like {c_lo.battery_increase_pct:.2f}% vs s20-like "
                     f"{c_hi.battery_increase_pct:.2f}%, sponge drain {drains[1][0]:.3g}% vs {drains[1][1]:.3g}%")
    assert record(5, ok, "; ".join(parts))


def test_criterion_6_porting(trained):
    runs, _ = trained
    t0 = time.perf_counter()
    ok, worst_acc, worst_keep = True, 0.0, np.inf
    for (arch, seed), (spec, arms, (_, test)) in runs.items():
        dens = {}
        for arm in ("vanilla", "sponge"):
            params, hist = arms[arm][1], arms[arm][2]
            _, (_, q) = pipeline.port(spec, params, test.images[:pipeline.CALIBRATION_IMAGES], True)
            q_acc, q_dens = training.evaluate(spec, q.dequantized_params(), test)
            drop = 100 * abs(hist.final_accuracy - q_acc)
            worst_acc = max(worst_acc, drop)
            ok &= drop <= 3.0
            dens[arm] = (hist.final_density, q_dens)
        gap_f = dens["sponge"][0] - dens["vanilla"][0]
        gap_q = dens["sponge"][1] - dens["vanilla"][1]
        if gap_f > 0:
            worst_keep = min(worst_keep, gap_q / gap_f)
            ok &= gap_q >= 0.5 * gap_f
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    assert record(6, ok, f"10 model pairs: worst quantized accuracy change {worst_acc:.2f} pts (<= 3), "
                         f"worst density gap kept {worst_keep:.0%} (>= 50%), {dt:.1f}s (<= 60s)")


# -- end-to-end runs -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiments(tmp_path_factory):
    base = tmp_path_factory.mktemp("experiment")
    runs = []
    for name in ("a", "b"):
        out = base / name
        t0 = time.perf_counter()
        code = cli_main(["--seed", "0", "--out", str(out), "experiment"])
        runs.append((out, code, time.perf_counter() - t0))
    return runs


def _stripped(path):
    with open(path, encoding="utf-8") as f:
        return [bench.strip_wallclock(json.loads(line)) for line in f]


def test_criterion_7_determinism_and_round_trips(experiments, tmp_path):
    (a, code_a, _), (b, code_b, _) = experiments
    problems = []
    if code_a or code_b:
        problems.append(f"exit codes {code_a}, {code_b}")
    if _stripped(a / "report.jsonl") != _stripped(b / "report.jsonl"):
        problems.append("report.jsonl differs beyond wall-clock fields")
    if (a / "training.jsonl").read_bytes() != (b / "training.jsonl").read_bytes():
        problems.append("training.jsonl differs")
    names = sorted(os.listdir(a / "models"))
    for name in names:
        blob = (a / "models" / name).read_bytes()
        if blob != (b / "models" / name).read_bytes():
            problems.append(f"{name} differs between runs")
        if deploy.export(*deploy.import_model(blob)) != blob:
            problems.append(f"{name} does not round-trip")
    header, results, comps = bench.read_report(a / "report.jsonl")
    again = bench.emit_report(results, comps, tmp_path, header={k: v for k, v in header.items() if k != "timestamp"},
                              timestamp=header["timestamp"], echo=False)
    if (a / "report.jsonl").read_bytes() != open(again["jsonl"], "rb").read():
        problems.append("report.jsonl does not re-emit byte-identically")
    records = pipeline.read_jsonl(a / "training.jsonl")
    if "".join(bench._dumps(r) + "\n" for r in records).encode() != (a / "training.jsonl").read_bytes():
        problems.append("training.jsonl does not round-trip")
    ok = not problems
    assert record(7, ok, f"two seed-0 experiments, {len(names)} .smod files, report and history JSONL: "
                         + ("identical and round-trip exact" if ok else "; ".join(problems)))


def test_criterion_8_end_to_end(experiments):
    out, code, dt = experiments[0]
    expected = ["report.jsonl", "summary.txt", "training.jsonl", "metric_time_ms.csv",
                "models/m1-sponge.q8.smod", "models/m2-vanilla.q8.smod"]
    missing = [p for p in expected if not (out / p).is_file()]
    _, results, comps = bench.read_report(out / "report.jsonl")
    ok = code == 0 and not missing and len(comps) == 8 and dt <= 600
    assert record(8, ok, f"cli_main experiment on quickstart: exit {code}, {len(results)} suites, "
                         f"{len(comps)} comparisons, missing {missing}, {dt:.0f}s (<= 600s)")
