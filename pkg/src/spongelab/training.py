"""Vanilla and sponge training objectives, SGD loop, and grid search.

The sponge objective subtracts ``lam * E`` from the cross-entropy, where ``E``
is the smooth nonzero-count surrogate of the post-ReLU activations normalised
by their element count. It is applied to a seeded ``delta`` fraction of batches.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .data import Dataset
from .models import ActivationTrace, ModelSpec
from .tensor import DTYPE, NonFiniteError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "vanilla"
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    lam: float = 0.0
    sigma: float = 1e-4
    delta: float = 1.0
    accuracy_slack: float = 0.02

    def __post_init__(self):
        if self.mode not in ("vanilla", "sponge"):
            raise ValueError(f"mode must be 'vanilla' or 'sponge', got {self.mode!r}")
        if self.mode == "vanilla" and self.lam != 0:
            raise ValueError("vanilla mode requires lam == 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.accuracy_slack < 0:
            raise ValueError("accuracy_slack must be >= 0")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    density: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1]

    @property
    def final_density(self) -> float:
        return self.density[-1]


def l0_hat(activations, sigma: float) -> float:
    """Smooth nonzero count: sum of a^2 / (a^2 + sigma)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    a2 = np.square(np.asarray(activations, dtype=np.float64))
    return float((a2 / (a2 + sigma)).sum())


def l0_hat_grad(activations, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    a = np.asarray(activations, dtype=np.float64)
    return 2.0 * a * sigma / np.square(a * a + sigma)


def sponge_penalty(trace: ActivationTrace, sigma: float) -> tuple[float, list[np.ndarray]]:
    """Normalised density surrogate over the whole trace and its per-entry gradients."""
    total = trace.total_count
    if total == 0:
        return 0.0, []
    value = sum(l0_hat(e.activation, sigma) for e in trace) / total
    grads = [(l0_hat_grad(e.activation, sigma) / total).astype(DTYPE) for e in trace]
    return value, grads


def evaluate(spec: ModelSpec, params, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Test accuracy and exact post-ReLU activation density."""
    correct = nonzero = count = 0
    for i in range(0, len(dataset), batch_size):
        logits, trace = models.forward(spec, params, dataset.images[i:i + batch_size], record_trace=True)
        correct += int((logits.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
        nonzero += trace.total_nonzero
        count += trace.total_count
    return correct / len(dataset), (nonzero / count if count else 0.0)


def train(spec: ModelSpec, data: tuple[Dataset, Dataset], config: TrainConfig,
          params: dict | None = None):
    """Minibatch SGD; returns ``(params, history)``. Deterministic given ``config.seed``."""
    train_set, test_set = data
    if len(train_set) == 0:
        raise ValueError("training data is empty")
    ss = np.random.SeedSequence(config.seed)
    init_seq, shuffle_seq, sponge_seq = ss.spawn(3)
    if params is None:
        params = models.init_params(spec, int(init_seq.generate_state(1)[0]))
    params = {k: v.copy() for k, v in params.items()}
    shuffle_rng = np.random.default_rng(shuffle_seq)
    sponge_rng = np.random.default_rng(sponge_seq)
    lr = DTYPE(config.learning_rate)
    lam = config.lam if config.mode == "sponge" else 0.0

    def penalty(trace):
        value, grads = sponge_penalty(trace, config.sigma)
        return -lam * value, [(-lam * g).astype(DTYPE) for g in grads]

    history = TrainHistory()
    n = len(train_set)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        n_batches = -(-n // config.batch_size)
        apply = sponge_rng.random(n_batches) < config.delta
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            use_penalty = lam > 0 and bool(apply[b])
            try:
                loss, grads, _ = models.backward(spec, params, train_set.images[idx], train_set.labels[idx],
                                                 penalty if use_penalty else None)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, f"loss is {loss}")
            for k, g in grads.items():
                params[k] -= lr * g
            losses.append(loss)
        acc, dens = evaluate(spec, params, test_set)
        history.loss.append(float(np.mean(losses)))
        history.accuracy.append(acc)
        history.density.append(dens)
        log.debug("epoch %d loss %.4f acc %.3f density %.3f", epoch, history.loss[-1], acc, dens)
    return params, history


def sponge_effect(vanilla: TrainHistory, sponge: TrainHistory) -> float:
    """Final activation density of the sponge run minus that of the vanilla run."""
    return sponge.final_density - vanilla.final_density


@dataclass(frozen=True)
class GridSpec:
    lam: tuple = (1.0, 5.0)
    sigma: tuple = (1e-4,)
    delta: tuple = (1.0,)
    learning_rate: tuple = (0.05,)
    max_cells: int = 36

    def __post_init__(self):
        for name in ("lam", "sigma", "delta", "learning_rate"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"grid list {name!r} is empty")
        if self.size > self.max_cells:
            raise ValueError(f"grid has {self.size} cells, cap is {self.max_cells}")

    @property
    def size(self) -> int:
        return len(self.lam) * len(self.sigma) * len(self.delta) * len(self.learning_rate)

    def cells(self):
        for lr, lam, sigma, delta in itertools.product(self.learning_rate, self.lam, self.sigma, self.delta):
            yield {"learning_rate": lr, "lam": lam, "sigma": sigma, "delta": delta}


@dataclass
class CellResult:
    index: int
    config: TrainConfig
    accuracy: float
    density: float
    history: TrainHistory = None
    params: dict = None


@dataclass
class GridResult:
    best: CellResult
    cells: list
    vanilla: list
    reference_accuracy: float
    feasible: bool


def cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def select_best(outcomes, reference_accuracy: float, accuracy_slack: float):
    """Index of the chosen cell among ``(accuracy, density, lam)`` outcomes.

    Feasible cells keep accuracy within ``accuracy_slack`` of the reference; the
    densest feasible cell wins, ties going to higher accuracy, smaller lam, then
    grid order. With no feasible cell the most accurate one is returned and the
    second value is False.
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no grid outcomes to select from")
    floor = reference_accuracy - accuracy_slack
    feasible = [i for i, (acc, _, _) in enumerate(outcomes) if acc >= floor - 1e-12]
    if not feasible:
        return max(range(len(outcomes)), key=lambda i: (outcomes[i][0], -i)), False
    key = lambda i: (outcomes[i][1], outcomes[i][0], -outcomes[i][2], -i)
    return max(feasible, key=key), True


def _train_cell(args):
    spec, data, config = args
    params, hist = train(spec, data, config)
    return params, hist


def grid_search(spec: ModelSpec, data, grid: GridSpec, accuracy_slack: float,
                base: TrainConfig | None = None, n_jobs: int = 1) -> GridResult:
    """Trains a vanilla reference per learning rate plus one sponge model per grid cell."""
    base = base or TrainConfig()
    vanilla_cfgs = [replace(base, mode="vanilla", lam=0.0, learning_rate=lr, delta=1.0)
                    for lr in grid.learning_rate]
    sponge_cfgs = [replace(base, mode="sponge", seed=cell_seed(base.seed, i), **cell)
                   for i, cell in enumerate(grid.cells())]
    jobs = [(spec, data, c) for c in vanilla_cfgs + sponge_cfgs]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(_train_cell, jobs))
    else:
        runs = [_train_cell(j) for j in jobs]
    results = [CellResult(i, cfg, h.final_accuracy, h.final_density, h, p)
               for i, (cfg, (p, h)) in enumerate(zip(vanilla_cfgs + sponge_cfgs, runs))]
    vanilla, cells = results[:len(vanilla_cfgs)], results[len(vanilla_cfgs):]
    for i, c in enumerate(cells):
        c.index = i
    reference = max(v.accuracy for v in vanilla)
    pick, feasible = select_best([(c.accuracy, c.density, c.config.lam) for c in cells],
                                 reference, accuracy_slack)
    if not feasible:
        log.warning("grid search: no cell within %.3f of vanilla accuracy %.3f; "
                    "returning the most accurate cell", accuracy_slack, reference)
    return GridResult(cells[pick], cells, vanilla, reference, feasible)
