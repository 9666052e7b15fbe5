"""A small classifier of adapter-augmented linear layers over a frozen base.

Each layer owns a frozen base weight (a Hadamard-group member), a frozen bias,
and an ordered stack of low-rank adapters, one per task.  The effective weight
is either the cumulative multiplicative update ``W * prod exp_taylor(B_t A_t)``
or the additive ablation ``W + sum B_t A_t``.  Only the newest adapter is ever
trainable; everything older is frozen byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, StateError
from .lie import GroupElement, LoraFactors, clamp_membership, delta_from_factors, exp_taylor, group_check
from .tensor import Tensor, add, add_bias, detach, hadamard, matmul, tanh, transpose

UPDATE_MODES = ("mult", "add")

# Base entries are resampled until they clear this magnitude, keeping the
# frozen weights comfortably inside the group.
BASE_MIN_MAGNITUDE = 1e-3


@dataclass
class AdaptedLinear:
    """One adapted layer: frozen base and bias plus a per-task adapter stack."""

    base: GroupElement
    bias: Tensor
    adapters: list[LoraFactors] = field(default_factory=list)
    update_mode: str = "mult"
    # Merge of the base with the first _prefix_count adapters, cached so the
    # frozen part of the stack is not recomposed on every forward pass.
    _prefix: Tensor | None = None
    _prefix_count: int = -1
    _prefix_order: int = -1

    @property
    def out_features(self) -> int:
        return self.base.shape[0]

    @property
    def in_features(self) -> int:
        return self.base.shape[1]

    def _merged_prefix(self, count: int, order: int) -> Tensor:
        if self._prefix is None or self._prefix_count != count or self._prefix_order != order:
            prefix = detach(self.base.value)
            for f in self.adapters[:count]:
                if self.update_mode == "mult":
                    prefix = hadamard(prefix, exp_taylor(delta_from_factors(f.frozen()), order))
                else:
                    prefix = add(prefix, delta_from_factors(f.frozen()))
            self._prefix = detach(prefix)
            self._prefix_count = count
            self._prefix_order = order
        return self._prefix

    def effective_weight(self, order: int, upto: int | None = None) -> Tensor:
        """The merged weight after the first `upto` adapters (all of them by default).

        In multiplicative mode the result is clamped to group membership; the
        association order matches compose_task_updates exactly.
        """
        count = len(self.adapters) if upto is None else upto
        if count == 0:
            return self.base.value
        prefix = self._merged_prefix(count - 1, order)
        current = self.adapters[count - 1]
        if self.update_mode == "mult":
            eff = hadamard(prefix, exp_taylor(delta_from_factors(current), order))
            return clamp_membership(eff)
        return add(prefix, delta_from_factors(current))

    def forward(self, x: Tensor, order: int, weight: Tensor | None = None) -> Tensor:
        """x @ W_eff^T + bias for a (batch x in) input."""
        w = weight if weight is not None else self.effective_weight(order)
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"forward: input {x.shape} does not match layer in_features {self.in_features}")
        return add_bias(matmul(x, transpose(w)), self.bias)


class ClassifierModel:
    """Stacked adapted layers with tanh between them; the last layer emits logits."""

    def __init__(self, layers: list[AdaptedLinear], classes: int, taylor_order: int, update_mode: str,
                 rank: int, adapter_rng: np.random.Generator):
        if not layers:
            raise ContractError("ClassifierModel: need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ShapeError(
                    f"ClassifierModel: layer chain broken ({prev.out_features} -> {nxt.in_features})"
                )
        if layers[-1].out_features != classes:
            raise ShapeError(f"ClassifierModel: last layer emits {layers[-1].out_features}, expected {classes} classes")
        self.layers = layers
        self.classes = classes
        self.taylor_order = int(taylor_order)
        self.update_mode = update_mode
        self.rank = int(rank)
        self.task_active = False
        self._adapter_rng = adapter_rng

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def adapter_count(self) -> int:
        return len(self.layers[0].adapters)


def _sample_base(rng: np.random.Generator, out: int, in_: int) -> np.ndarray:
    """Unit-Gaussian base weights with small-magnitude entries resampled away.

    Unit scale keeps multiplicative updates (which see gradients damped by the
    base entries) conditioned like additive ones.
    """
    w = rng.normal(0.0, 1.0, size=(out, in_))
    small = np.abs(w) < BASE_MIN_MAGNITUDE
    while small.any():
        w[small] = rng.normal(0.0, 1.0, size=int(small.sum()))
        small = np.abs(w) < BASE_MIN_MAGNITUDE
    return w


def build_classifier(in_dim: int, hidden: int, classes: int, rank: int, update_mode: str,
                     taylor_order: int, seed: int) -> ClassifierModel:
    """The default desk-scale architecture: in_dim -> hidden -> classes, tanh between."""
    if update_mode not in UPDATE_MODES:
        raise ContractError(f"build_classifier: update_mode must be one of {UPDATE_MODES}, got {update_mode!r}")
    init_rng = np.random.default_rng([seed, 101])
    layers = []
    for out, in_ in ((hidden, in_dim), (classes, hidden)):
        base = group_check(Tensor(_sample_base(init_rng, out, in_)))
        bias = Tensor(np.zeros(out))
        layers.append(AdaptedLinear(base=base, bias=bias, update_mode=update_mode))
    adapter_rng = np.random.default_rng([seed, 102])
    return ClassifierModel(layers, classes, taylor_order, update_mode, rank, adapter_rng)


def forward(model: ClassifierModel, x: Tensor, weights: list[Tensor] | None = None) -> Tensor:
    """Logits for a (batch x in) input; `weights` overrides each layer's merged weight."""
    if weights is not None and len(weights) != len(model.layers):
        raise ShapeError(f"forward: {len(weights)} weights for {len(model.layers)} layers")
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        w = weights[i] if weights is not None else None
        h = layer.forward(h, model.taylor_order, weight=w)
        if i != last:
            h = tanh(h)
    return h


def begin_task(model: ClassifierModel) -> None:
    """Append a fresh neutral adapter to every layer and make it the only trainable one.

    Predecessors are frozen; because the new adapter's product is exactly
    zero, model outputs are bitwise unchanged.
    """
    if model.task_active:
        raise StateError("begin_task: a task is already in training")
    for layer in model.layers:
        layer.adapters = [f.frozen() for f in layer.adapters]
        layer.adapters.append(
            LoraFactors.neutral(layer.out_features, layer.in_features, model.rank, model._adapter_rng)
        )
    model.task_active = True


def finish_task(model: ClassifierModel) -> None:
    """Freeze the adapter trained for the task that just completed."""
    if not model.task_active:
        raise StateError("finish_task: no task is in training")
    for layer in model.layers:
        layer.adapters[-1] = layer.adapters[-1].frozen()
    model.task_active = False


def trainable_parameters(model: ClassifierModel) -> list[Tensor]:
    """The B and A tensors of the newest adapter of each layer; nothing else ever trains."""
    if not model.task_active:
        raise StateError("trainable_parameters: no task is in training")
    params: list[Tensor] = []
    for layer in model.layers:
        current = layer.adapters[-1]
        params.extend((current.B, current.A))
    return params
