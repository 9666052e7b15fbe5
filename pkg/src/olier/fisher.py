"""Diagonal Fisher information of the effective weights, and the weighted energy
of the change the final task induced in directions the penultimate task cares about."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .model import ClassifierModel, forward
from .tensor import Tensor, backward, cross_entropy, scale

# How the parameter delta between consecutive tasks is measured: as the change
# of the merged per-layer weights, which is the coordinate system the Fisher
# diagonal is computed in.  For additive updates this equals the raw B A
# product of the final adapter.
DELTA_CONVENTION = "effective-weight-delta"


@dataclass
class FisherReport:
    """Per-layer diagonal Fisher estimates and the weighted energy of a delta."""

    fisher: list[np.ndarray]
    energy: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if any((f < 0).any() for f in self.fisher):
            raise ContractError("FisherReport: Fisher entries must be nonnegative")
        if self.energy < 0:
            raise ContractError("FisherReport: energy must be nonnegative")


def _effective_weights(model: ClassifierModel, upto: int | None = None) -> list[np.ndarray]:
    return [np.array(layer.effective_weight(model.taylor_order, upto=upto).data) for layer in model.layers]


def fisher_diag(model: ClassifierModel, features: np.ndarray, labels: np.ndarray,
                upto: int | None = None) -> list[np.ndarray]:
    """Empirical diagonal Fisher of the merged weights over the given samples.

    For each sample the gradient of log p(y|x) with respect to every merged
    weight entry is squared; the estimate is the mean over samples.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ContractError("fisher_diag: need a nonempty (n x dim) sample matrix")
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"fisher_diag: labels shape {labels.shape} != ({features.shape[0]},)")

    weight_values = _effective_weights(model, upto=upto)
    totals = [np.zeros_like(w) for w in weight_values]
    n = features.shape[0]
    for i in range(n):
        leaves = [Tensor(w, requires_grad=True) for w in weight_values]
        logits = forward(model, Tensor(features[i:i + 1]), weights=leaves)
        log_likelihood = scale(cross_entropy(logits, labels[i:i + 1]), -1.0)
        grads = backward(log_likelihood)
        for total, leaf in zip(totals, leaves):
            g = grads.get(leaf)
            if g is not None:
                total += g.data * g.data
    return [t / n for t in totals]


def fisher_energy(fisher, delta) -> float:
    """sum_i F_i * delta_i^2 over matching shapes."""
    f_list = fisher if isinstance(fisher, (list, tuple)) else [fisher]
    d_list = delta if isinstance(delta, (list, tuple)) else [delta]
    if len(f_list) != len(d_list):
        raise ShapeError(f"fisher_energy: {len(f_list)} Fisher blocks vs {len(d_list)} delta blocks")
    total = 0.0
    for f, d in zip(f_list, d_list):
        f = np.asarray(f, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if f.shape != d.shape:
            raise ShapeError(f"fisher_energy: shapes {f.shape} and {d.shape} differ")
        total += float(np.sum(f * d * d))
    return total


def cross_task_energy(model_prev: ClassifierModel, model_full: ClassifierModel,
                      features: np.ndarray, labels: np.ndarray,
                      metadata: dict | None = None) -> FisherReport:
    """Fisher-weighted energy of the weight change between two consecutive model states.

    ``model_prev`` is the state after the penultimate task and supplies both
    the Fisher diagonal (estimated on that task's data) and the reference
    weights; ``model_full`` is the state after the final task.
    """
    fisher = fisher_diag(model_prev, features, labels)
    prev_w = _effective_weights(model_prev)
    full_w = _effective_weights(model_full)
    deltas = [w1 - w0 for w0, w1 in zip(prev_w, full_w)]
    energy = fisher_energy(fisher, deltas)
    meta = {"delta_convention": DELTA_CONVENTION, "fisher_data_split": "train"}
    if metadata:
        meta.update(metadata)
    return FisherReport(fisher=fisher, energy=energy, metadata=meta)
