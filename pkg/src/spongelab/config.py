"""INI-style key-value configuration for training, grids, data, benches and devices.

See ``configs/quickstart.ini`` for a complete commented example. Section map:

    [experiment]      seed, architectures, profiles, executors, quantize, grid_search, n_jobs,
                      sponge_data (same | disjoint)
    [data]            source (synth | cifar10), cifar10_dir, n_train, n_test, classes, shape, noise
    [model.m1]        stem, blocks            (blocks: "channels:stride, ...")
    [model.m2]        width, n_blocks, stem_stride
    [train]           TrainConfig fields; ``lambda`` maps to ``lam``
    [grid]            lambda, sigma, delta, learning_rate (comma lists), max_cells
    [bench]           BenchConfig fields
    [profile.<name>]  DeviceProfile fields; overrides or adds a device
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources

from . import energy, models
from .bench import BenchConfig
from .energy import DeviceProfile
from .training import GridSpec, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synth"
    cifar10_dir: str = ""
    n_train: int = 240
    n_test: int = 200
    classes: int = 4
    shape: tuple = (3, 8, 8)
    noise: float = 0.1


@dataclass
class ExperimentConfig:
    seed: int = 0
    architectures: tuple = ("m1", "m2")
    profiles: tuple = ("s20-like", "nexus5-like")
    executors: tuple = ("zero_skip", "dense")
    quantize: bool = True
    grid_search: bool = True
    n_jobs: int = 1
    sponge_data: str = "same"     # same | disjoint: attacker trains on the other half of the train set
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    devices: dict = field(default_factory=lambda: dict(energy.PRESETS))

    def device(self, name: str) -> DeviceProfile:
        try:
            return self.devices[name]
        except KeyError:
            raise ConfigError(f"unknown device profile {name!r}") from None

    def build_model(self, arch: str):
        kwargs = dict(self.model.get(arch, {}))
        builder = models.PRESETS.get(arch)
        if builder is None:
            raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(models.PRESETS)}")
        return builder(tuple(self.data.shape), self.data.classes, **kwargs)


def _list(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in _list(s))


def _shape(s: str) -> tuple:
    shape = tuple(int(x) for x in s.lower().replace(" ", "").split("x"))
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"shape must be CxHxW, got {s!r}")
    return shape


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(cls, section, rename=None, special=None):
    rename = rename or {}
    special = special or {}
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        name = rename.get(key, key)
        if name not in types:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        if name in special:
            out[name] = special[name](raw)
            continue
        t = str(types[name])
        try:
            if t.startswith("int"):
                out[name] = int(raw)
            elif t.startswith("float"):
                out[name] = float(raw)
            elif t.startswith("bool"):
                out[name] = _bool(raw)
            else:
                out[name] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    return out


def _blocks(s: str) -> tuple:
    out = []
    for item in _list(s):
        ch, _, stride = item.partition(":")
        out.append((int(ch), int(stride or 1)))
    return tuple(out)


def parse_config(text: str, seed: int | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    known = {"experiment", "data", "train", "grid", "bench"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith(("model.", "profile.")):
            raise ConfigError(f"unknown section [{sec}]")
    try:
        if cp.has_section("experiment"):
            s = cp["experiment"]
            for key, raw in s.items():
                if key in ("architectures", "profiles", "executors"):
                    setattr(cfg, key, _list(raw))
                elif key in ("quantize", "grid_search"):
                    setattr(cfg, key, _bool(raw))
                elif key in ("seed", "n_jobs"):
                    setattr(cfg, key, int(raw))
                elif key == "sponge_data":
                    if raw.strip() not in ("same", "disjoint"):
                        raise ConfigError(f"[experiment] sponge_data must be same or disjoint, got {raw!r}")
                    cfg.sponge_data = raw.strip()
                else:
                    raise ConfigError(f"[experiment] unknown key {key!r}")
        if cp.has_section("data"):
            cfg.data = DataConfig(**_coerce(DataConfig, cp["data"], special={"shape": _shape}))
        for sec in cp.sections():
            if sec.startswith("model."):
                arch = sec.split(".", 1)[1]
                kw = {}
                for key, raw in cp[sec].items():
                    kw[key] = _blocks(raw) if key == "blocks" else int(raw)
                cfg.model[arch] = kw
            elif sec.startswith("profile."):
                name = sec.split(".", 1)[1]
                base = {f.name: getattr(cfg.devices[name], f.name) for f in fields(DeviceProfile)} \
                    if name in cfg.devices else {"name": name}
                base.update(_coerce(DeviceProfile, cp[sec]))
                base["name"] = name
                cfg.devices[name] = DeviceProfile(**base)
        train_seed = None
        if cp.has_section("train"):
            kw = _coerce(TrainConfig, cp["train"], rename={"lambda": "lam"})
            train_seed = kw.get("seed")
            cfg.train = TrainConfig(**kw)
        if cp.has_section("grid"):
            kw = _coerce(GridSpec, cp["grid"], rename={"lambda": "lam"},
                         special={"lam": _floats, "sigma": _floats, "delta": _floats, "learning_rate": _floats})
            cfg.grid = GridSpec(**kw)
        if cp.has_section("bench"):
            cfg.bench = BenchConfig(**_coerce(BenchConfig, cp["bench"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if seed is not None:
        cfg.seed = seed
    if train_seed is None or seed is not None:
        cfg.train = _with(cfg.train, seed=cfg.seed)
    cfg.bench = _with(cfg.bench, seed=cfg.seed)
    for name in cfg.profiles:
        cfg.device(name)
    return cfg


def _with(obj, **kw):
    return replace(obj, **kw)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), seed)


def quickstart_text() -> str:
    return resources.files("spongelab").joinpath("configs/quickstart.ini").read_text(encoding="utf-8")


def quickstart(seed: int | None = None) -> ExperimentConfig:
    return parse_config(quickstart_text(), seed)
