# %% [markdown]
# # Training a sponge model
#
# Sponge training adds a reward for dense activations to the usual
# classification loss. The reward is a smooth count of nonzero activations
# that saturates at one per unit, so it cannot grow without bound.

# %%
from dataclasses import replace

import numpy as np

from spongelab import config, pipeline, training

cfg = config.quickstart(seed=0)
split = pipeline.load_data(cfg)
spec = cfg.build_model("m1")

# %% [markdown]
# The smooth count approaches the exact number of nonzeros as sigma shrinks.

# %%
a = np.array([0.0, 0.0, 0.01, 0.5, 2.0], dtype=np.float32)
for sigma in (1e-1, 1e-2, 1e-4, 1e-8):
    print(f"sigma {sigma:g}: {training.l0_hat(a, sigma):.4f} (exact 3)")

# %% [markdown]
# Vanilla and sponge arms with the same seed, data order and schedule.

# %%
vanilla_cfg = replace(cfg.train, mode="vanilla", lam=0.0)
sponge_cfg = replace(cfg.train, mode="sponge", lam=8.0, sigma=1e-4)
_, van = training.train(spec, split, vanilla_cfg)
_, spo = training.train(spec, split, sponge_cfg)
for e in list(range(0, cfg.train.epochs, 5)) + [cfg.train.epochs - 1]:
    print(f"epoch {e:2d}  vanilla acc {van.accuracy[e]:.3f} dens {van.density[e]:.3f}   "
          f"sponge acc {spo.accuracy[e]:.3f} dens {spo.density[e]:.3f}")
print(f"density increase {training.sponge_effect(van, spo):+.3f}")

# %% [markdown]
# Grid search keeps the densest model whose accuracy stays within the slack
# of the best vanilla run.

# %%
gr = training.grid_search(spec, split, cfg.grid, cfg.train.accuracy_slack, base=cfg.train)
for c in gr.cells:
    mark = "<-" if c.index == gr.best.index else ""
    print(f"lambda {c.config.lam:4g} sigma {c.config.sigma:6g}: acc {c.accuracy:.3f} dens {c.density:.3f} {mark}")
print("reference accuracy", gr.reference_accuracy, "feasible", gr.feasible)
