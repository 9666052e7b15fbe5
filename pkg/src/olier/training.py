"""Sequential-task training loop, evaluation, and the accuracy-matrix metric.

One configuration drives the whole run: the method decides which penalty is
active and whether a fresh adapter is added per task, the update mode decides
multiplicative versus additive merging, and the seed pins every source of
randomness so a rerun reproduces the accuracy matrix bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import Task, TaskStream
from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .lie import delta_from_factors, exp_taylor
from .losses import LossWeights, nlora_sparsity, olora_loss, overlap_sum, total_loss
from .model import ClassifierModel, begin_task, build_classifier, finish_task, forward
from .tensor import Tensor, add, backward, cross_entropy

METHODS = ("olier", "olora", "nlora", "seq-lora", "inc-lora")

MOMENTUM = 0.9
DIVERGENCE_LIMIT = 1e6

DEFAULT_HIDDEN = 64
DEFAULT_RANK = 4


@dataclass(frozen=True)
class TrainingConfig:
    method: str = "olier"
    taylor_order: int = 2
    loss_weights: LossWeights = field(default_factory=lambda: LossWeights(lambda_orth=0.5))
    # 1e-3 is the largest rate at which the order-2 orthogonality penalty
    # stays stable under momentum across a 5-task stream.
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    update_mode: str | None = None  # None: "mult" for olier, "add" for the baselines

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.taylor_order < 1:
            raise ConfigError(f"taylor_order must be >= 1, got {self.taylor_order}")
        if self.update_mode not in (None, "mult", "add"):
            raise ConfigError(f"update_mode must be 'mult' or 'add', got {self.update_mode!r}")

    @property
    def effective_update_mode(self) -> str:
        if self.update_mode is not None:
            return self.update_mode
        return "mult" if self.method == "olier" else "add"


@dataclass
class TrainingLog:
    """Per-step loss components for one task; all lists have length epochs * batches."""

    task_id: int
    task_loss: list[float] = field(default_factory=list)
    orth_loss: list[float] = field(default_factory=list)
    sparse_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.task_loss)


@dataclass
class AccuracyMatrix:
    """values[i, j] = accuracy on task i's test set after training task j (i <= j)."""

    values: np.ndarray

    @property
    def task_count(self) -> int:
        return self.values.shape[0]

    @classmethod
    def empty(cls, tasks: int) -> "AccuracyMatrix":
        return cls(values=np.full((tasks, tasks), np.nan))

    def final_column(self) -> np.ndarray:
        return self.values[:, -1]

    def validate(self) -> None:
        upper = self.values[np.triu_indices(self.task_count)]
        if np.isnan(upper).any():
            raise ContractError("AccuracyMatrix: upper triangle not fully populated")
        if (upper < 0).any() or (upper > 1).any():
            raise ContractError("AccuracyMatrix: accuracies must lie in [0, 1]")

    def forgetting(self) -> float:
        """Mean over tasks of (best accuracy ever seen) - (final accuracy)."""
        drops = []
        for i in range(self.task_count):
            row = self.values[i, i:]
            drops.append(float(np.nanmax(row) - row[-1]))
        return float(np.mean(drops))


def average_accuracy(m: AccuracyMatrix) -> float:
    """Mean of the accuracy matrix's final column."""
    col = m.final_column()
    if np.isnan(col).any():
        raise ContractError("average_accuracy: final column is not fully populated")
    return float(col.mean())


def _penalties(model: ClassifierModel, config: TrainingConfig,
               prev_exps: list[list[Tensor]] | None) -> tuple[Tensor, Tensor]:
    """The (orth, sparse) scalars for the current step, per the configured method."""
    zero = Tensor(np.zeros(()))
    orth, sparse = zero, zero
    if config.method == "olier":
        terms = None
        for layer, exps in zip(model.layers, prev_exps or []):
            if not exps:
                continue
            cur = exp_taylor(delta_from_factors(layer.adapters[-1]), config.taylor_order)
            t = overlap_sum(cur, exps)
            terms = t if terms is None else add(terms, t)
        if terms is not None:
            orth = terms
    elif config.method == "olora":
        terms = None
        for layer in model.layers:
            prev_bs = [f.B for f in layer.adapters[:-1]]
            if not prev_bs:
                continue
            t = olora_loss(layer.adapters[-1].B, prev_bs)
            terms = t if terms is None else add(terms, t)
        if terms is not None:
            orth = terms
    elif config.method == "nlora":
        terms = None
        for layer in model.layers:
            t = nlora_sparsity(layer.adapters[-1])
            terms = t if terms is None else add(terms, t)
        if terms is not None:
            sparse = terms
    return orth, sparse


def train_task(model: ClassifierModel, task: Task, config: TrainingConfig) -> TrainingLog:
    """Optimize the newest adapters against the total loss with momentum SGD.

    Deterministic given the seed; aborts with a diagnostic if the loss
    diverges.  Returns per-step loss components.
    """
    if not model.task_active:
        raise ContractError("train_task: begin_task must be called first")

    rng = np.random.default_rng([config.seed, 301, task.id])
    n = task.train_x.shape[0]
    log = TrainingLog(task_id=task.id)

    # Exponential-map images of frozen adapters are constant for the whole
    # task; compute them once instead of once per step.
    prev_exps = None
    if config.method == "olier":
        prev_exps = [
            [exp_taylor(delta_from_factors(f), config.taylor_order) for f in layer.adapters[:-1]]
            for layer in model.layers
        ]

    velocity: dict[tuple[int, str], np.ndarray] = {}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = Tensor(task.train_x[idx])
            y = task.train_y[idx]
            try:
                logits = forward(model, x)
                task_l = cross_entropy(logits, y)
                orth, sparse = _penalties(model, config, prev_exps)
                loss = total_loss(task_l, orth, sparse, config.loss_weights)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged on task {task.id}: {exc}") from exc
            loss_value = loss.item()
            if not np.isfinite(loss_value) or loss_value > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"training diverged on task {task.id}: loss {loss_value:.3e} exceeds {DIVERGENCE_LIMIT:.0e}"
                )
            log.task_loss.append(task_l.item())
            log.orth_loss.append(orth.item())
            log.sparse_loss.append(sparse.item())

            grads = backward(loss)
            for li, layer in enumerate(model.layers):
                current = layer.adapters[-1]
                for name in ("B", "A"):
                    p = getattr(current, name)
                    g = grads.get(p)
                    gd = g.data if g is not None else np.zeros(p.shape)
                    v = velocity.get((li, name))
                    v = MOMENTUM * v + gd if v is not None else gd.copy()
                    velocity[(li, name)] = v
                    setattr(current, name, Tensor(p.data - config.learning_rate * v, requires_grad=True))
    return log


def evaluate(model: ClassifierModel, task: Task) -> float:
    """Fraction of argmax-correct test predictions; argmax ties go to the lowest class."""
    if model.adapter_count < 1:
        raise ContractError("evaluate: model has no trained adapters")
    if task.test_x.shape[0] == 0:
        raise ContractError("evaluate: empty test set")
    logits = forward(model, Tensor(task.test_x))
    preds = np.argmax(logits.data, axis=1)
    return float(np.mean(preds == task.test_y))


@dataclass
class StreamResult:
    """Everything a completed run produced, ready for persistence and diagnostics."""

    matrix: AccuracyMatrix
    logs: list[TrainingLog]
    model: ClassifierModel
    per_task_seconds: list[float]
    config: TrainingConfig
    stream: TaskStream
    # State of each layer's newest adapter at the end of every task, so the
    # per-task weight trajectory is recoverable even when one adapter is
    # reused across tasks.
    adapter_snapshots: list[list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)


def build_model_for_stream(stream: TaskStream, config: TrainingConfig,
                           hidden: int = DEFAULT_HIDDEN, rank: int = DEFAULT_RANK) -> ClassifierModel:
    first = stream.tasks[0]
    classes = first.classes
    if any(t.classes != classes or t.dim != first.dim for t in stream.tasks):
        raise ConfigError("build_model_for_stream: tasks must share feature dim and class count")
    # the low-rank condition bounds the rank by the narrowest layer
    rank = min(rank, classes, hidden, first.dim)
    return build_classifier(first.dim, hidden, classes, rank,
                            config.effective_update_mode, config.taylor_order, config.seed)


def run_stream(stream: TaskStream, config: TrainingConfig) -> StreamResult:
    """Train the configured method over the stream and fill the accuracy matrix.

    The trainer sees exactly one task at a time; after each task, every task
    seen so far is evaluated.
    """
    if len(stream.tasks) == 0:
        raise ContractError("run_stream: stream is empty")
    model = build_model_for_stream(stream, config)
    t_count = len(stream.tasks)
    matrix = AccuracyMatrix.empty(t_count)
    logs: list[TrainingLog] = []
    seconds: list[float] = []
    snapshots: list[list[tuple[np.ndarray, np.ndarray]]] = []

    single_adapter = config.method == "seq-lora"
    for j, task in enumerate(stream.tasks):
        started = time.perf_counter()
        if not single_adapter or j == 0:
            begin_task(model)
        logs.append(train_task(model, task, config))
        snapshots.append([
            (np.array(layer.adapters[-1].B.data), np.array(layer.adapters[-1].A.data))
            for layer in model.layers
        ])
        if not single_adapter:
            finish_task(model)
        seconds.append(time.perf_counter() - started)
        for i in range(j + 1):
            matrix.values[i, j] = evaluate(model, stream.tasks[i])
    if single_adapter:
        finish_task(model)

    matrix.validate()
    return StreamResult(matrix=matrix, logs=logs, model=model, per_task_seconds=seconds,
                        config=config, stream=stream, adapter_snapshots=snapshots)
