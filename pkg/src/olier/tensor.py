"""Dense float64 tensors (rank <= 2) with a define-by-run reverse-mode gradient tape.

Every public operation validates shapes, produces finite values, and records
itself on the implicit tape when any input is tracked.  Gradients are obtained
by calling :func:`backward` on a scalar result; the recorded graph is consumed
by that call.  Tensors are immutable values and safe to share for reading; a
single backward pass must not run concurrently with ops on the same graph.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class _Node:
    """One recorded operation: tracked parents and per-parent gradient functions."""

    __slots__ = ("parents", "grad_fns")

    def __init__(self, parents, grad_fns):
        self.parents = parents
        self.grad_fns = grad_fns


class Tensor:
    """Immutable dense tensor of float64 values in row-major order, rank <= 2."""

    __slots__ = ("data", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported (max rank 2)")
        _check_finite(arr, "Tensor")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _from_op(cls, arr: np.ndarray, node: _Node | None, op: str) -> "Tensor":
        _check_finite(arr, op)
        arr.setflags(write=False)
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        """Whether gradients flow into or through this tensor."""
        return self.requires_grad or self._node is not None

    def item(self) -> float:
        if self.data.ndim != 0:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below are the canonical surface.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(arr: np.ndarray, op: str, pairs) -> Tensor:
    """Wrap an op result, recording gradient functions for tracked parents only."""
    tracked = [(p, fn) for p, fn in pairs if p.tracked]
    node = None
    if tracked:
        node = _Node(tuple(p for p, _ in tracked), tuple(fn for _, fn in tracked))
    return Tensor._from_op(arr, node, op)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def ones(shape) -> Tensor:
    """All-ones tensor; the identity element of the Hadamard group."""
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("ones: shape must be nonempty")
    if any(d < 1 for d in shape):
        raise ShapeError(f"ones: all dimensions must be >= 1, got {shape}")
    return Tensor._from_op(np.ones(shape), None, "ones")


def zeros(shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("zeros: shape must be nonempty")
    if any(d < 1 for d in shape):
        raise ShapeError(f"zeros: all dimensions must be >= 1, got {shape}")
    return Tensor._from_op(np.zeros(shape), None, "zeros")


def detach(a: Tensor) -> Tensor:
    """A view of the same values that no gradient flows into or through."""
    if not a.tracked:
        return a
    return Tensor._from_op(np.asarray(a.data), None, "detach")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _record(a.data + b.data, "add", [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _record(a.data - b.data, "sub", [(a, lambda g: g), (b, lambda g: -g)])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, "scale", [(a, lambda g: g * c)])


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _require_same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _record(ad * bd, "hadamard", [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: both operands must be rank 2, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} do not agree")
    ad, bd = a.data, b.data
    return _record(
        ad @ bd,
        "matmul",
        [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)],
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: requires rank 2, got {a.shape}")
    return _record(a.data.T.copy(), "transpose", [(a, lambda g: g.T)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])


def sum_entries(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    shape = a.shape
    return _record(np.asarray(a.data.sum()), "sum_entries", [(a, lambda g: np.full(shape, g))])


def frobenius_norm(a: Tensor) -> Tensor:
    """sqrt of the sum of squared entries; gradient is x / ||x|| (0 at the zero tensor)."""
    ad = a.data
    norm = float(np.sqrt(np.sum(ad * ad)))

    def grad_fn(g):
        if norm == 0.0:
            return np.zeros_like(ad)
        return g * (ad / norm)

    return _record(np.asarray(norm), "frobenius_norm", [(a, grad_fn)])


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values; subgradient of |.| at 0 is taken to be 0."""
    ad = a.data
    return _record(np.asarray(np.abs(ad).sum()), "l1_norm", [(a, lambda g: g * np.sign(ad))])


def add_bias(m: Tensor, bias: Tensor) -> Tensor:
    """Add a length-k vector to every row of a (n x k) tensor."""
    if m.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"add_bias: need rank-2 and rank-1 operands, got {m.shape} and {bias.shape}")
    if m.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: row width {m.shape[1]} != bias length {bias.shape[0]}")
    return _record(
        m.data + bias.data,
        "add_bias",
        [(m, lambda g: g), (bias, lambda g: g.sum(axis=0))],
    )


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "sum") -> Tensor:
    """Softmax cross-entropy of integer labels against (batch x classes) logits.

    The default reduction sums the per-sample negative log-likelihoods, which
    keeps the task term on the same scale as the summed data log-likelihood it
    estimates; "mean" divides by the batch size.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be rank 2, got {logits.shape}")
    if reduction not in ("sum", "mean"):
        raise ContractError(f"cross_entropy: unknown reduction {reduction!r}")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if n < 1:
        raise ContractError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(f"cross_entropy: labels must lie in [0, {classes})")
    labels = labels.astype(np.intp)
    denom = n if reduction == "mean" else 1

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].sum() / denom

    def grad_fn(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return grad * (g / denom)

    return _record(np.asarray(loss), "cross_entropy", [(logits, grad_fn)])


class GradientTape:
    """One reverse pass: the recorded nodes of a scalar loss in topological order,
    and the gradients accumulated while replaying them in reverse."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[bool, Tensor]] = [(False, loss)]
        while stack:
            done, t = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((True, t))
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) not in seen:
                        stack.append((False, p))
        self.order = order

    def gradients(self) -> dict[Tensor, Tensor]:
        partial: dict[int, np.ndarray] = {id(self.loss): np.ones(())}
        result: dict[Tensor, Tensor] = {}
        for t in reversed(self.order):
            g = partial.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                if t.requires_grad:
                    result[t] = Tensor._from_op(np.array(g, dtype=np.float64), None, "grad")
                continue
            for p, fn in zip(node.parents, node.grad_fns):
                pg = fn(g)
                acc = partial.get(id(p))
                partial[id(p)] = pg if acc is None else acc + pg
        # The graph is consumed: a second backward through it is not supported.
        for t in self.order:
            t._node = None
        return result


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar loss with respect to every tracked leaf it reaches.

    Leaves the loss does not depend on are absent from the map, not zero-filled.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    return GradientTape(loss).gradients()


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function, entry by entry."""
    if step <= 0:
        raise ContractError("finite_diff_grad: step must be positive")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_base.size):
        saved = flat_base[i]
        flat_base[i] = saved + step
        hi = evaluate(base)
        flat_base[i] = saved - step
        lo = evaluate(base)
        flat_base[i] = saved
        flat_grad[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad)


def relative_error(approx: Tensor | np.ndarray, reference: Tensor | np.ndarray) -> float:
    """max |a - b| / (1 + max |b|); the agreement measure used by the gradient checks."""
    a = approx.data if isinstance(approx, Tensor) else np.asarray(approx)
    b = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(b))))


GradientMap = Mapping[Tensor, Tensor]
