import numpy as np
import pytest

from spongelab import energy, models
from spongelab.energy import DeviceProfile
from spongelab.models import ActivationTrace, LayerSpec, ModelSpec, TraceEntry

from cases import random_model
from oracles import naive_mac_counts

UNIT = DeviceProfile("unit", e_mac=1.0, e_skip=0.1, base_overhead=0.0, battery_capacity=1000, battery_voltage=3.7)


def relu_dense(n_in=3, n_out=2):
    layers = (LayerSpec("relu", (n_in,), (n_in,), n_in),
              LayerSpec("dense", (n_in,), (n_out,), n_in, n_out))
    return ModelSpec("relu_dense", (n_in,), n_out, layers)


def _run(spec, x, params=None):
    params = params or {k: np.ones(s, np.float32) for k, s in models.param_shapes(spec).items()}
    _, trace = models.forward(spec, params, np.asarray(x, np.float32), record_trace=True)
    return trace


# -- static counts ---------------------------------------------------------------

def test_dense_formula():
    ops = energy.count_ops(relu_dense())
    assert ops.total == 6 and ops.dependent == 6


def test_pointwise_formula_and_stem_not_skippable():
    layers = (LayerSpec("pointwise_conv", (2, 4, 4), (3, 4, 4), 2, 3, 1),
              LayerSpec("flatten", (3, 4, 4), (48,)),
              LayerSpec("dense", (48,), (2,), 48, 2))
    ops = energy.count_ops(ModelSpec("pw", (2, 4, 4), 2, layers))
    conv = ops.sites[0]
    assert conv.total == 4 * 4 * 3 * 1 * 1 * 2 == 96
    assert conv.dependent == 0
    assert ops.total == 96 + 96


def test_count_ops_rejects_wrong_input_shape():
    with pytest.raises(ValueError):
        energy.count_ops(relu_dense(), (4,))


@pytest.mark.parametrize("seed", range(6))
def test_totals_match_instrumented_counts(seed):
    spec, params, x = random_model(seed)
    executed, skipped = naive_mac_counts(spec, params, x)
    assert executed + skipped == len(x) * energy.count_ops(spec).total


# -- density ------------------------------------------------------------------------------

def test_measure_density_cases():
    t = ActivationTrace([TraceEntry(0, "0", np.array([[0, 1, 0, 5]], np.float32))])
    per, overall = energy.measure_density(t)
    assert overall == 0.5 and per == {"0": 0.5}
    assert energy.measure_density(ActivationTrace([TraceEntry(0, "0", np.zeros((2, 3)))]))[1] == 0.0
    assert energy.measure_density(ActivationTrace([TraceEntry(0, "0", np.ones((2, 3)))]))[1] == 1.0


def test_overall_density_is_weighted_mean():
    spec, params, x = random_model(4, batch=3)
    _, trace = models.forward(spec, params, x, record_trace=True)
    per, overall = energy.measure_density(trace)
    weighted = sum(per[e.name] * e.count for e in trace) / trace.total_count
    assert overall == pytest.approx(weighted, abs=1e-12)


# -- energy ------------------------------------------------------------------------------------

def test_single_dense_example():
    spec = relu_dense()
    rpt = energy.simulate_energy(energy.count_ops(spec), _run(spec, [[0, 2, 0]]), UNIT)
    assert (rpt.executed_macs, rpt.skipped_macs) == (2, 4)
    assert rpt.energy_actual == pytest.approx(2.4)
    assert rpt.energy_worst_case == pytest.approx(6.0)
    assert rpt.energy_gap_ratio == pytest.approx(0.4)


def test_floor_and_ceiling():
    spec = relu_dense()
    ops = energy.count_ops(spec)
    p = DeviceProfile("p", e_mac=1.0, e_skip=0.1, base_overhead=7.0, battery_capacity=1, battery_voltage=1)
    low = energy.simulate_energy(ops, _run(spec, [[-1, -2, 0]]), p)
    assert low.energy_actual == pytest.approx(6 * 0.1 + 7.0)
    high = energy.simulate_energy(ops, _run(spec, [[1, 2, 3]]), p)
    assert high.energy_actual == pytest.approx(high.energy_worst_case)
    assert high.energy_gap_ratio == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_naive_oracle(seed):
    spec, params, x = random_model(seed)
    _, trace = models.forward(spec, params, x, record_trace=True)
    rpt = energy.simulate_energy(energy.count_ops(spec), trace, UNIT)
    assert (rpt.executed_macs, rpt.skipped_macs) == naive_mac_counts(spec, params, x)


@pytest.mark.parametrize("seed", range(5))
def test_bounds(seed):
    spec, params, x = random_model(seed)
    _, trace = models.forward(spec, params, x, record_trace=True)
    ops = energy.count_ops(spec)
    for p in energy.PRESETS.values():
        r = energy.simulate_energy(ops, trace, p)
        floor = ((ops.total - ops.dependent) * p.e_mac + ops.dependent * p.e_skip) + p.base_overhead
        assert floor - 1e-9 <= r.energy_actual <= r.energy_worst_case + 1e-9
        assert 0 < r.energy_gap_ratio <= 1


def test_energy_strictly_increasing_in_nonzeros():
    spec = relu_dense(6, 3)
    ops = energy.count_ops(spec)
    x = np.zeros((1, 6), np.float32)
    last = -np.inf
    for i in range(6):
        x[0, i] = 1.0
        e = energy.simulate_energy(ops, _run(spec, x), UNIT).energy_actual
        assert e > last
        last = e


def test_trace_misalignment_errors():
    spec = relu_dense()
    ops = energy.count_ops(spec)
    bad = ActivationTrace([TraceEntry(0, "0", np.ones((1, 4), np.float32))])
    with pytest.raises(ValueError):
        energy.simulate_energy(ops, bad, UNIT)
    with pytest.raises(ValueError):
        energy.simulate_energy(ops, ActivationTrace(), UNIT)


# -- battery --------------------------------------------------------------------------------

def test_battery_cases():
    assert energy.battery_drain(2e6, 0, UNIT) == 0.0
    pct = energy.battery_drain(2e6, 2000, UNIT)
    # 4 J out of 1 Ah * 3.7 V * 3600 s = 13320 J
    assert pct == pytest.approx(100 * 4 / 13320, rel=1e-12)
    assert round(pct, 2) == 0.03
    half = DeviceProfile("h", 1.0, 0.1, 0.0, 500, 3.7)
    assert energy.battery_drain(2e6, 2000, half) == pytest.approx(2 * energy.battery_drain(2e6, 2000, UNIT))


@pytest.mark.parametrize("seed", range(5))
def test_low_end_profile_drains_more(seed):
    spec, params, x = random_model(seed)
    _, trace = models.forward(spec, params, x, record_trace=True)
    ops = energy.count_ops(spec)
    hi = energy.simulate_energy(ops, trace, energy.get_profile("s20-like"), battery_inferences=2000)
    lo = energy.simulate_energy(ops, trace, energy.get_profile("nexus5-like"), battery_inferences=2000)
    assert lo.battery_drain_percent > hi.battery_drain_percent


def test_profile_validation():
    with pytest.raises(ValueError):
        DeviceProfile("x", e_mac=1.0, e_skip=1.0, base_overhead=0, battery_capacity=1, battery_voltage=1)
    with pytest.raises(ValueError):
        DeviceProfile("x", e_mac=1.0, e_skip=0.1, base_overhead=0, battery_capacity=0, battery_voltage=1)
    with pytest.raises(KeyError):
        energy.get_profile("pixel-like")


# -- latency ------------------------------------------------------------------------------------

def test_latency_scale_cases():
    spec = relu_dense(4, 2)
    ops = energy.count_ops(spec)
    a = energy.simulate_energy(ops, _run(spec, [[1, 0, 1, 0]]), UNIT)
    b = energy.simulate_energy(ops, _run(spec, [[0, 1, 0, 1]]), UNIT)
    assert energy.latency_scale(a, b) == 1.0
    c = energy.simulate_energy(ops, _run(spec, [[1, 1, 1, 0]]), UNIT)
    ratio = (c.executed_macs + 0.1 * c.skipped_macs) / (a.executed_macs + 0.1 * a.skipped_macs)
    assert energy.latency_scale(c, a) == pytest.approx(ratio)
    free = DeviceProfile("free", 1.0, 0.0, 0.0, 1, 1)
    full = energy.simulate_energy(ops, _run(spec, [[1, 1, 1, 1]]), free)
    half = energy.simulate_energy(ops, _run(spec, [[1, 1, 0, 0]]), free)
    assert energy.latency_scale(full, half) == pytest.approx(2.0)


def test_merge_and_reprice():
    spec, params, x = random_model(1, batch=4)
    ops = energy.count_ops(spec)
    _, whole = models.forward(spec, params, x, record_trace=True)
    _, t1 = models.forward(spec, params, x[:2], record_trace=True)
    _, t2 = models.forward(spec, params, x[2:], record_trace=True)
    p = energy.get_profile("s20-like")
    merged = energy.merge_reports([energy.simulate_energy(ops, t, p) for t in (t1, t2)], p)
    direct = energy.simulate_energy(ops, whole, p)
    assert (merged.executed_macs, merged.skipped_macs) == (direct.executed_macs, direct.skipped_macs)
    assert merged.energy_actual == pytest.approx(direct.energy_actual)
    q = energy.get_profile("nexus5-like")
    assert energy.with_profile(direct, q).energy_actual == pytest.approx(energy.simulate_energy(ops, whole, q).energy_actual)
