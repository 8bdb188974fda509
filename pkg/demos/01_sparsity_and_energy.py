# %% [markdown]
# # Activation sparsity and what it costs
#
# A zero-skipping accelerator only pays full price for multiply-accumulates
# whose activation operand is nonzero. This walk-through builds a small
# network, looks at how many of its post-ReLU activations are zero, and
# prices one inference on two simulated phones.

# %%
import numpy as np

from spongelab import data, energy, models

spec = models.build_m1_micronet((3, 8, 8), 4, stem=8, blocks=((16, 2), (16, 1)))
params = models.init_params(spec, seed=0)
train, test = data.synth_split(0, 240, 200, classes=4, shape=(3, 8, 8))

# %% [markdown]
# Static MAC counts per layer. ``dependent`` MACs read a ReLU output and
# are the ones a zero-skipping device can avoid.

# %%
ops = energy.count_ops(spec)
for site in ops.sites:
    print(f"{site.name:>10s} {site.kind:>15s} total {site.total:7d} skippable {site.dependent:7d}")
print("total", ops.total, "skippable", ops.dependent)

# %%
_, trace = models.forward(spec, params, test.images, record_trace=True)
per_layer, overall = energy.measure_density(trace)
for name, d in per_layer.items():
    print(f"layer {name:>8s}: density {d:.3f}")
print(f"overall density {overall:.3f}")

# %% [markdown]
# The same trace priced on both device presets. The low-end profile spends
# more per MAC and has a smaller battery, so identical work drains more of it.

# %%
for name, profile in energy.PRESETS.items():
    r = energy.simulate_energy(ops, trace, profile, battery_inferences=2000)
    print(f"{name:12s} {r.energy_actual / 1e3:8.2f} uJ/inference "
          f"(worst case {r.energy_worst_case / 1e3:.2f}, ratio {r.energy_gap_ratio:.3f}) "
          f"2000 inferences drain {r.battery_drain_percent:.4f}% of the battery")

# %% [markdown]
# Shifting every bias upward makes more units fire. Density goes up and so
# does the simulated energy.

# %%
for shift in (0.0, 0.1, 0.3):
    p = {k: v + shift if ".b" in k else v for k, v in params.items()}
    _, t = models.forward(spec, p, test.images, record_trace=True)
    r = energy.simulate_energy(ops, t, energy.get_profile("s20-like"))
    print(f"bias +{shift:.1f}: density {t.density():.3f}  energy {r.energy_actual / 1e3:.2f} uJ")
