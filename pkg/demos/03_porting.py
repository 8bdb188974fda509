# %% [markdown]
# # Porting to a phone: 8-bit quantization and the .smod file
#
# A deployed model is usually quantized. Here we check whether the sponge
# effect survives post-training quantization and a trip through the
# on-device file format.

# %%
import os
import tempfile
from dataclasses import replace

from spongelab import config, deploy, pipeline, training

cfg = config.quickstart(seed=1)
train, test = pipeline.load_data(cfg)
spec = cfg.build_model("m2")
arms = {}
for arm, tc in (("vanilla", replace(cfg.train, mode="vanilla", lam=0.0)),
                ("sponge", replace(cfg.train, mode="sponge", lam=8.0, sigma=1e-2))):
    arms[arm], _ = training.train(spec, (train, test), tc)

# %% [markdown]
# Weights get one scale and zero point per tensor; activations are
# calibrated on a handful of test images.

# %%
calib = test.images[:pipeline.CALIBRATION_IMAGES]
out = tempfile.mkdtemp()
for arm, params in arms.items():
    q = deploy.quantize_post_training(spec, params, calib)
    path = os.path.join(out, f"m2-{arm}.q8.smod")
    deploy.save(path, spec, q)
    spec2, q2 = deploy.load(path)
    f_acc, f_d = training.evaluate(spec, params, test)
    q_acc, q_d = training.evaluate(spec2, q2.dequantized_params(), test)
    print(f"{arm:8s} float acc {f_acc:.3f} dens {f_d:.3f} | 8-bit acc {q_acc:.3f} dens {q_d:.3f} "
          f"| {os.path.getsize(path)} bytes")

# %% [markdown]
# A damaged file is rejected with a specific error rather than loading garbage.

# %%
blob = open(path, "rb").read()
for bad in (b"XXXX" + blob[4:], blob[:len(blob) // 2]):
    try:
        deploy.import_model(bad)
    except deploy.SmodError as exc:
        print(type(exc).__name__, exc)
