"""End-to-end experiment: train both arms, port, benchmark on each device, compare."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, replace

from . import bench, data, deploy, training
from .config import ExperimentConfig

log = logging.getLogger(__name__)

CALIBRATION_IMAGES = 64


def load_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "cifar10":
        if not d.cifar10_dir:
            raise ValueError("[data] source = cifar10 needs cifar10_dir")
        train, test = data.load_cifar10(d.cifar10_dir)
        if d.n_train < len(train):
            train = data.subsample(train, d.n_train, cfg.seed)
        if d.n_test < len(test):
            test = data.subsample(test, d.n_test, cfg.seed + 1)
        return train, test
    if d.source != "synth":
        raise ValueError(f"unknown data source {d.source!r}")
    return data.synth_split(cfg.seed, d.n_train, d.n_test, d.classes, d.shape, d.noise)


def _history_record(arch, arm, cfg, hist) -> dict:
    return {"schema": bench.SCHEMA, "type": "history", "arch": arch, "arm": arm,
            "config": asdict(cfg), "loss": hist.loss, "accuracy": hist.accuracy,
            "density": hist.density}


def train_arms(cfg: ExperimentConfig, arch: str, split):
    """Returns ``(spec, {arm: (config, params, history)}, extra_records)``.

    With ``sponge_data = disjoint`` the vanilla (victim) arm trains on one half
    of the training set and the sponge (attacker) arm on the other; both are
    evaluated on the same test set.
    """
    spec = cfg.build_model(arch)
    train_set, test_set = split
    van_split = sp_split = split
    if cfg.sponge_data == "disjoint":
        a, b = data.disjoint_halves(train_set, cfg.seed)
        van_split, sp_split = (a, test_set), (b, test_set)
    records = []
    van_cfg = replace(cfg.train, mode="vanilla", lam=0.0)
    if cfg.grid_search:
        gr = training.grid_search(spec, sp_split, cfg.grid, cfg.train.accuracy_slack,
                                  base=cfg.train, n_jobs=cfg.n_jobs)
        if van_split is sp_split:
            van = max(gr.vanilla, key=lambda v: (v.accuracy, -v.index))
            vanilla = (van.config, van.params, van.history)
        else:
            vanilla = (van_cfg, *training.train(spec, van_split, van_cfg))
        arms = {"vanilla": vanilla, "sponge": (gr.best.config, gr.best.params, gr.best.history)}
        for c in gr.cells:
            records.append({"schema": bench.SCHEMA, "type": "grid_cell", "arch": arch,
                            "index": c.index, "lam": c.config.lam, "sigma": c.config.sigma,
                            "delta": c.config.delta, "learning_rate": c.config.learning_rate,
                            "accuracy": c.accuracy, "density": c.density,
                            "selected": c.index == gr.best.index, "feasible": gr.feasible})
    else:
        arms = {}
        sp_cfg = cfg.train if cfg.train.mode == "sponge" else replace(cfg.train, mode="sponge", lam=1.0)
        for arm, tc, sp in (("vanilla", van_cfg, van_split), ("sponge", sp_cfg, sp_split)):
            params, hist = training.train(spec, sp, tc)
            arms[arm] = (tc, params, hist)
    return spec, arms, records


def port(spec, params, calibration, quantize: bool):
    """Export, optionally quantize, and re-import: the model as a deployment would load it."""
    model = deploy.quantize_post_training(spec, params, calibration) if quantize else params
    blob = deploy.export(spec, model)
    spec2, loaded = deploy.import_model(blob)
    return blob, (spec2, loaded)


def run_experiment(cfg: ExperimentConfig, out_dir, timestamp: str | None = None, echo: bool = True) -> dict:
    """Runs the whole pipeline and writes reports, histories and ``.smod`` files to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    model_dir = os.path.join(out_dir, "models")
    os.makedirs(model_dir, exist_ok=True)
    train_set, test_set = load_data(cfg)
    calibration = test_set.images[:CALIBRATION_IMAGES]
    history_lines = []
    porting = []
    deployed = {}
    for arch in cfg.architectures:
        log.info("training %s", arch)
        spec, arms, extra = train_arms(cfg, arch, (train_set, test_set))
        history_lines += extra
        for arm, (tc, params, hist) in arms.items():
            history_lines.append(_history_record(arch, arm, tc, hist))
            deploy.save(os.path.join(model_dir, f"{arch}-{arm}.smod"), spec, params)
            blob, model = port(spec, params, calibration, cfg.quantize)
            if cfg.quantize:
                with open(os.path.join(model_dir, f"{arch}-{arm}.q8.smod"), "wb") as f:
                    f.write(blob)
            q_acc, q_dens = training.evaluate(*bench._as_float_model(model), test_set)
            porting.append({"arch": arch, "arm": arm, "float_accuracy": hist.final_accuracy,
                            "float_density": hist.final_density, "deployed_accuracy": q_acc,
                            "deployed_density": q_dens, "quantized": cfg.quantize,
                            "smod_bytes": len(blob)})
            deployed[(arch, arm)] = model

    results, comparisons = [], []
    profiles = [cfg.device(p) for p in cfg.profiles]
    for arch in cfg.architectures:
        for executor in cfg.executors:
            bc = replace(cfg.bench, executor=executor)
            labels = {f"{arch}-vanilla": deployed[(arch, "vanilla")],
                      f"{arch}-sponge": deployed[(arch, "sponge")]}
            log.info("benchmarking %s with %s executor", arch, executor)
            res = bench.run_suites(labels, test_set, bc, profiles)
            for p in profiles:
                v, s = res[f"{arch}-vanilla"][p.name], res[f"{arch}-sponge"][p.name]
                results += [v, s]
                comparisons.append(bench.compare(v, s))

    with open(os.path.join(out_dir, "training.jsonl"), "w", encoding="utf-8") as f:
        for rec in history_lines:
            f.write(bench._dumps(rec) + "\n")
    header = {
        "seed": cfg.seed,
        "sponge_data": cfg.sponge_data,
        "data": {**asdict(cfg.data), "shape": list(cfg.data.shape)},
        "n_samples": cfg.bench.n_samples,
        "repetitions": cfg.bench.repetitions,
        "scaling": f"suites of {cfg.bench.n_samples} samples x {cfg.bench.repetitions} repetitions "
                   f"(full-scale default is 2000 x 20)",
        "profiles": {p.name: asdict(p) for p in profiles},
        "porting": porting,
    }
    paths = bench.emit_report(results, comparisons, out_dir, header=header,
                              timestamp=timestamp, echo=echo)
    paths["training"] = os.path.join(out_dir, "training.jsonl")
    paths["models"] = model_dir
    return {"paths": paths, "results": results, "comparisons": comparisons, "porting": porting}


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
