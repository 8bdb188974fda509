# %% [markdown]
# # Benchmarking vanilla against sponge
#
# Both models run on the zero-skipping executor, whose wall time tracks the
# number of nonzero activations, and on the dense executor as a control.
# Repetitions of the two models alternate so drift hits both equally.

# %%
import tempfile
from dataclasses import replace

from spongelab import bench, config, pipeline

cfg = config.quickstart(seed=0)
train, test = pipeline.load_data(cfg)
spec, arms, _ = pipeline.train_arms(cfg, "m1", (train, test))
models = {f"m1-{arm}": (spec, params) for arm, (_, params, _) in arms.items()}

# %%
results, comparisons = [], []
for executor in ("zero_skip", "dense"):
    bc = replace(cfg.bench, executor=executor, repetitions=10)
    res = bench.run_suites(models, test, bc, cfg.profiles)
    for profile in cfg.profiles:
        v, s = res["m1-vanilla"][profile], res["m1-sponge"][profile]
        results += [v, s]
        comparisons.append(bench.compare(v, s))

# %% [markdown]
# On the zero-skip executor the sponge model should be slower and drain more
# battery, more so on the low-end profile. The dense control should show no
# significant time difference.

# %%
out = tempfile.mkdtemp()
paths = bench.emit_report(results, comparisons, out, header={"demo": "benchmark"})
print("report:", paths["jsonl"])
