"""Run persistence: adapter checkpoints, stream files, manifests, results tables.

Checkpoints and stream files are line-oriented text with every float printed
at 17 significant digits, so save -> load -> save reproduces the file byte for
byte and a run can be replayed across implementations.  The manifest is a JSON
document that, together with the code, reproduces a run exactly; wall-clock
fields are the only part of any artifact that is not a pure function of
(flags, seed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import Task, TaskStream, make_stream
from .errors import CheckpointError, ContractError
from .fisher import FisherReport, cross_task_energy
from .lie import LoraFactors
from .model import ClassifierModel, build_classifier
from .tensor import Tensor
from .training import AccuracyMatrix, StreamResult, TrainingConfig, average_accuracy

CHECKPOINT_MAGIC = "olier-adapter-checkpoint"
CHECKPOINT_VERSION = 1
STREAM_MAGIC = "olier-task-stream"
STREAM_VERSION = 1
MANIFEST_FORMAT = "olier-run-manifest"
MANIFEST_VERSION = 1

RESULTS_HEADER = "method,order,taylor,seed,task,a_iT,A_T"
TAYLOR_TABLE_HEADER = "method,order,taylor,seed,A_T"
MULT_TABLE_HEADER = "method,order,taylor,seed,a_t_mult,a_t_add,delta_a_t"


def fmt(x: float) -> str:
    """Canonical decimal form: 17 significant digits, enough to round-trip a double."""
    return f"{float(x):.17g}"


def _matrix_lines(arr: np.ndarray) -> list[str]:
    return [" ".join(fmt(v) for v in row) for row in np.atleast_2d(arr)]


def _parse_matrix(lines: list[str], rows: int, cols: int, what: str) -> np.ndarray:
    if len(lines) < rows:
        raise CheckpointError(f"corrupt file: {what} is truncated")
    try:
        arr = np.array([[float(v) for v in lines[r].split()] for r in range(rows)])
    except ValueError as exc:
        raise CheckpointError(f"corrupt file: bad number in {what}") from exc
    if arr.shape != (rows, cols):
        raise CheckpointError(f"corrupt file: {what} has shape {arr.shape}, expected {(rows, cols)}")
    return arr


@dataclass
class AdapterCheckpoint:
    """Per-layer, per-task adapter factor arrays plus the run metadata needed to merge them."""

    method: str
    update_mode: str
    taylor_order: int
    adapters: list[list[tuple[np.ndarray, np.ndarray]]]  # [layer][task] -> (B, A)
    version: int = CHECKPOINT_VERSION

    @property
    def layer_count(self) -> int:
        return len(self.adapters)

    @property
    def task_count(self) -> int:
        return len(self.adapters[0]) if self.adapters else 0

    @classmethod
    def from_result(cls, result: StreamResult) -> "AdapterCheckpoint":
        layers = len(result.model.layers)
        per_layer: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(layers)]
        for snapshot in result.adapter_snapshots:
            for li, (b, a) in enumerate(snapshot):
                per_layer[li].append((b, a))
        return cls(
            method=result.config.method,
            update_mode=result.config.effective_update_mode,
            taylor_order=result.config.taylor_order,
            adapters=per_layer,
        )


def save_checkpoint(path: str | Path, ckpt: AdapterCheckpoint) -> None:
    lines = [
        f"{CHECKPOINT_MAGIC} {ckpt.version}",
        f"method {ckpt.method}",
        f"update_mode {ckpt.update_mode}",
        f"taylor_order {ckpt.taylor_order}",
        f"layers {ckpt.layer_count}",
        f"tasks {ckpt.task_count}",
    ]
    for li, stack in enumerate(ckpt.adapters):
        for ti, (b, a) in enumerate(stack):
            for name, arr in (("B", b), ("A", a)):
                lines.append(f"tensor {li} {ti} {name} {arr.shape[0]} {arr.shape[1]}")
                lines.extend(_matrix_lines(arr))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> AdapterCheckpoint:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise CheckpointError("corrupt file: empty checkpoint")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not an adapter checkpoint (missing magic {CHECKPOINT_MAGIC!r})")
    if head[1] != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {head[1]} (expected {CHECKPOINT_VERSION})")

    def keyed(idx: int, key: str) -> str:
        if idx >= len(lines):
            raise CheckpointError("corrupt file: truncated header")
        parts = lines[idx].split(maxsplit=1)
        if len(parts) != 2 or parts[0] != key:
            raise CheckpointError(f"corrupt file: expected {key!r} on line {idx + 1}")
        return parts[1]

    try:
        method = keyed(1, "method")
        update_mode = keyed(2, "update_mode")
        taylor_order = int(keyed(3, "taylor_order"))
        layers = int(keyed(4, "layers"))
        tasks = int(keyed(5, "tasks"))

        adapters: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(layers)]
        idx = 6
        for li in range(layers):
            for ti in range(tasks):
                pair = {}
                for name in ("B", "A"):
                    if idx >= len(lines):
                        raise CheckpointError("corrupt file: truncated tensor table")
                    parts = lines[idx].split()
                    if len(parts) != 6 or parts[0] != "tensor":
                        raise CheckpointError(f"corrupt file: bad tensor header on line {idx + 1}")
                    if (int(parts[1]), int(parts[2]), parts[3]) != (li, ti, name):
                        raise CheckpointError(f"corrupt file: tensor {parts[1:4]} out of order on line {idx + 1}")
                    rows, cols = int(parts[4]), int(parts[5])
                    idx += 1
                    pair[name] = _parse_matrix(lines[idx:idx + rows], rows, cols, f"tensor {li}/{ti}/{name}")
                    idx += rows
                adapters[li].append((pair["B"], pair["A"]))
    except CheckpointError:
        raise
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"corrupt file: {exc}") from exc
    if idx >= len(lines) or lines[idx] != "end":
        raise CheckpointError("corrupt file: missing end marker")
    return AdapterCheckpoint(method=method, update_mode=update_mode, taylor_order=taylor_order,
                             adapters=adapters)


def rebuild_model(ckpt: AdapterCheckpoint, config: TrainingConfig, upto_task: int | None = None) -> ClassifierModel:
    """Reconstruct the model state after `upto_task` tasks from a checkpoint.

    Base weights are regenerated from the config seed; adapter stacks come
    from the checkpoint.  A method that reuses one adapter across tasks is
    restored from that task's snapshot alone.
    """
    if ckpt.layer_count != 2:
        raise CheckpointError(f"unsupported layer count {ckpt.layer_count} (expected 2)")
    upto = ckpt.task_count if upto_task is None else upto_task
    if upto < 1 or upto > ckpt.task_count:
        raise ContractError(f"rebuild_model: upto_task {upto} outside 1..{ckpt.task_count}")

    first_b, first_a = ckpt.adapters[0][0]
    hidden, rank = first_b.shape
    in_dim = first_a.shape[1]
    classes = ckpt.adapters[1][0][0].shape[0]
    model = build_classifier(in_dim, hidden, classes, rank, ckpt.update_mode,
                             ckpt.taylor_order, config.seed)
    for li, layer in enumerate(model.layers):
        entries = [ckpt.adapters[li][upto - 1]] if ckpt.method == "seq-lora" else ckpt.adapters[li][:upto]
        layer.adapters = [LoraFactors(B=Tensor(b), A=Tensor(a)) for b, a in entries]
    return model


def save_stream(path: str | Path, stream: TaskStream) -> None:
    lines = [
        f"{STREAM_MAGIC} {STREAM_VERSION}",
        f"kind {stream.kind}",
        f"seed {stream.seed}",
        f"order_label {stream.order_label}",
        f"tasks {len(stream.tasks)}",
    ]
    for task in stream.tasks:
        lines.append(f"task {task.id} {task.kind} {task.seed} {task.classes}")
        for split, x, y in (("train", task.train_x, task.train_y), ("test", task.test_x, task.test_y)):
            lines.append(f"{split} {x.shape[0]} {x.shape[1]}")
            lines.extend(_matrix_lines(x))
            lines.append("labels " + " ".join(str(int(v)) for v in y))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_stream(path: str | Path) -> TaskStream:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CheckpointError("corrupt file: empty stream file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != STREAM_MAGIC:
        raise CheckpointError(f"not a task-stream file (missing magic {STREAM_MAGIC!r})")
    if head[1] != str(STREAM_VERSION):
        raise CheckpointError(f"unsupported stream version {head[1]} (expected {STREAM_VERSION})")
    try:
        kind = lines[1].split(maxsplit=1)[1]
        seed = int(lines[2].split()[1])
        order_label = lines[3].split(maxsplit=1)[1]
        count = int(lines[4].split()[1])
        idx = 5
        tasks: list[Task] = []
        for _ in range(count):
            parts = lines[idx].split()
            if parts[0] != "task" or len(parts) != 5:
                raise CheckpointError(f"corrupt file: bad task header on line {idx + 1}")
            task_id, task_kind, task_seed, classes = int(parts[1]), parts[2], int(parts[3]), int(parts[4])
            idx += 1
            splits = {}
            for split in ("train", "test"):
                sp = lines[idx].split()
                if sp[0] != split or len(sp) != 3:
                    raise CheckpointError(f"corrupt file: bad split header on line {idx + 1}")
                n, d = int(sp[1]), int(sp[2])
                idx += 1
                x = _parse_matrix(lines[idx:idx + n], n, d, f"task {task_id} {split}")
                idx += n
                lp = lines[idx].split()
                if lp[0] != "labels" or len(lp) != n + 1:
                    raise CheckpointError(f"corrupt file: bad labels on line {idx + 1}")
                y = np.array([int(v) for v in lp[1:]], dtype=np.int64)
                idx += 1
                splits[split] = (x, y)
            tasks.append(Task(id=task_id, train_x=splits["train"][0], train_y=splits["train"][1],
                              test_x=splits["test"][0], test_y=splits["test"][1],
                              classes=classes, kind=task_kind, seed=task_seed))
    except CheckpointError:
        raise
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"corrupt file: {exc}") from exc
    if idx >= len(lines) or lines[idx] != "end":
        raise CheckpointError("corrupt file: missing end marker")
    return TaskStream(tasks=tasks, order_label=order_label, kind=kind, seed=seed)


def stream_from_descriptor(desc: dict) -> TaskStream:
    """Regenerate a stream from its manifest descriptor, including task order."""
    base = make_stream(desc["kind"], desc["tasks"], desc["seed"], classes=desc["classes"],
                       train_size=desc["train_size"], test_size=desc["test_size"], dim=desc["dim"])
    by_id = {t.id: t for t in base.tasks}
    tasks = [by_id[i] for i in desc.get("task_ids", range(desc["tasks"]))]
    return TaskStream(tasks=tasks, order_label=desc.get("order_label", "order-1"),
                      kind=base.kind, seed=base.seed)


@dataclass
class RunManifest:
    """Self-contained record of one run: config, stream recipe, metrics, traces."""

    config: dict
    stream: dict
    accuracy_matrix: list[list[float | None]]
    average_accuracy: float
    per_task_seconds: list[float]
    started_utc: str
    loss_traces: list[dict]
    seed: int
    tool_version: str = __version__
    fisher: dict | None = None
    format: str = MANIFEST_FORMAT
    version: int = MANIFEST_VERSION

    @classmethod
    def from_result(cls, result: StreamResult, started_utc: str) -> "RunManifest":
        cfg = result.config
        matrix = [[None if np.isnan(v) else float(v) for v in row] for row in result.matrix.values]
        traces = [
            {"task": log.task_id, "task_loss": log.task_loss, "orth_loss": log.orth_loss,
             "sparse_loss": log.sparse_loss}
            for log in result.logs
        ]
        return cls(
            config={
                "method": cfg.method,
                "taylor_order": cfg.taylor_order,
                "lambda_orth": cfg.loss_weights.lambda_orth,
                "lambda_sparse": cfg.loss_weights.lambda_sparse,
                "learning_rate": cfg.learning_rate,
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "seed": cfg.seed,
                "update_mode": cfg.effective_update_mode,
            },
            stream=result.stream.descriptor(),
            accuracy_matrix=matrix,
            average_accuracy=average_accuracy(result.matrix),
            per_task_seconds=result.per_task_seconds,
            started_utc=started_utc,
            loss_traces=traces,
            seed=cfg.seed,
        )

    def training_config(self) -> TrainingConfig:
        from .losses import LossWeights

        c = self.config
        return TrainingConfig(
            method=c["method"], taylor_order=c["taylor_order"],
            loss_weights=LossWeights(c["lambda_orth"], c["lambda_sparse"]),
            learning_rate=c["learning_rate"], epochs=c["epochs"], batch_size=c["batch_size"],
            seed=c["seed"], update_mode=c["update_mode"],
        )

    def accuracy(self) -> AccuracyMatrix:
        values = np.array([[np.nan if v is None else v for v in row] for row in self.accuracy_matrix])
        return AccuracyMatrix(values=values)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != MANIFEST_FORMAT:
            raise CheckpointError("not a run manifest")
        if payload.get("version") != MANIFEST_VERSION:
            raise CheckpointError(f"unsupported manifest version {payload.get('version')}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from exc


def save_manifest(path: str | Path, manifest: RunManifest) -> None:
    Path(path).write_text(manifest.to_json() + "\n")


def load_manifest(path: str | Path) -> RunManifest:
    return RunManifest.from_json(Path(path).read_text())


def results_rows(result: StreamResult) -> list[str]:
    """Flat per-task rows of the final-column accuracies and the run average."""
    cfg = result.config
    a_t = average_accuracy(result.matrix)
    final = result.matrix.final_column()
    return [
        ",".join([cfg.method, result.stream.order_label, str(cfg.taylor_order), str(cfg.seed),
                  str(i), fmt(final[i]), fmt(a_t)])
        for i in range(result.matrix.task_count)
    ]


def write_results_table(path: str | Path, rows: list[str], header: str = RESULTS_HEADER,
                        append: bool = False) -> None:
    """Write or extend a results table; appending never rewrites existing rows."""
    path = Path(path)
    if append and path.exists():
        existing = path.read_text()
        if not existing.startswith(header):
            raise CheckpointError(f"results table {path} has a different header")
        path.write_text(existing + "".join(r + "\n" for r in rows))
    else:
        path.write_text(header + "\n" + "".join(r + "\n" for r in rows))


def fisher_report_for_run(ckpt: AdapterCheckpoint, stream: TaskStream,
                          config: TrainingConfig) -> FisherReport:
    """Cross-task Fisher energy from persisted run artifacts.

    The Fisher diagonal is estimated on the penultimate task's training data
    under the model state after the penultimate task; the delta is the merged
    weight change the final task introduced.
    """
    if ckpt.task_count < 2:
        raise ContractError(f"fisher energy needs a run of >= 2 tasks, got {ckpt.task_count}")
    model_prev = rebuild_model(ckpt, config, upto_task=ckpt.task_count - 1)
    model_full = rebuild_model(ckpt, config, upto_task=ckpt.task_count)
    penult = stream.tasks[ckpt.task_count - 2]
    return cross_task_energy(
        model_prev, model_full, penult.train_x, penult.train_y,
        metadata={"method": ckpt.method, "fisher_task": penult.id,
                  "adapters_before": ckpt.task_count - 1, "adapters_after": ckpt.task_count},
    )


def fisher_report_json(report: FisherReport) -> str:
    payload = {
        "format": "olier-fisher-report",
        "version": 1,
        "energy": report.energy,
        "metadata": report.metadata,
        "fisher": [f.tolist() for f in report.fisher],
    }
    return json.dumps(payload, indent=2, sort_keys=True)
