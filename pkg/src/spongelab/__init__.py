"""Sponge poisoning lab: numpy training engine, zero-skipping energy model and benchmark harness."""

from .bench import BenchConfig, aggregate, compare, emit_report, run_suite
from .cli import cli_main
from .data import load_cifar10, synth_dataset, synth_split
from .deploy import export, import_model, quantize_post_training
from .energy import count_ops, measure_density, simulate_energy
from .models import build_m1_micronet, build_m2_miniresnet, forward, init_params
from .training import GridSpec, TrainConfig, grid_search, train

__version__ = "0.1.0"
