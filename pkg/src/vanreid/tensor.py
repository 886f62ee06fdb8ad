"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps a float64 ndarray. Ops are looked up in a registry by kind name
and applied through ``apply``, which records a node on the implicit tape.
``backward`` walks the tape once from a scalar loss and frees it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpKind",
    "register_op",
    "apply",
    "backward",
    "finite_difference_check",
    "no_grad",
    "grad_enabled",
]

# Per-thread so inference helpers on worker threads never switch recording
# off under a training loop elsewhere.
_GRAD_STATE = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block, on this thread only."""
    prev = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class Tensor:
    """A float64 array plus an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_kind", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable | None = None
        self._kind: str | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's array, cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    # Arithmetic sugar; wrappers live in ops.py and are bound there to avoid
    # a circular import at module load.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __pow__(self, exponent):
        from . import ops

        return ops.pow_(self, float(exponent))

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag}, kind={self._kind})"


class OpKind:
    """Forward plus backward rule for one op kind.

    forward(*arrays, **params) -> ndarray
    backward(grad_out, out_data, *arrays, **params) -> one gradient array (or
    None) per input, in input order.
    """

    def __init__(self, name: str, forward: Callable, backward: Callable):
        self.name = name
        self.forward = forward
        self.backward = backward


_REGISTRY: dict[str, OpKind] = {}


def register_op(name: str, forward: Callable, backward: Callable) -> None:
    if name in _REGISTRY:
        raise ValueError(f"op kind already registered: {name}")
    _REGISTRY[name] = OpKind(name, forward, backward)


def registered_kinds() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def apply(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Run one op and record it on the tape if any input tracks gradients."""
    op = _REGISTRY.get(kind)
    if op is None:
        raise KeyError(f"unknown op kind: {kind!r}")
    arrays = [t.data for t in inputs]
    out = Tensor(op.forward(*arrays, **params))
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._kind = kind

        def _backprop(g, _op=op, _out=out.data, _arrays=arrays, _params=params):
            return _op.backward(g, _out, *_arrays, **_params)

        out._backprop = _backprop
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into leaf ``grad`` buffers.

    The tape is released afterwards; a second call on the same graph raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._freed:
        raise RuntimeError("backward: tape already freed by a previous call")
    if loss._backprop is None:
        raise ValueError("backward: loss is a leaf, the tape is empty")

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backprop is None:
            # Leaf: land the gradient, allocating the buffer on first use.
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        parent_grads = node._backprop(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            # Rules may hand back views of g, so never accumulate in place.
            grads[id(parent)] = pg if acc is None else acc + pg
        node._backprop = None
        node._parents = ()
        node._freed = True


def finite_difference_check(
    graph_builder: Callable[[Tensor], Tensor],
    input_tensor: Tensor,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``graph_builder`` maps one tensor to a scalar loss. Returns
    max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    base = np.array(input_tensor.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    loss = graph_builder(probe)
    backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.ravel()
    with no_grad():
        for i in range(base.size):
            bumped = base.copy()
            bumped.flat[i] += step
            f_plus = float(graph_builder(Tensor(bumped)).data.reshape(()))
            bumped = base.copy()
            bumped.flat[i] -= step
            f_minus = float(graph_builder(Tensor(bumped)).data.reshape(()))
            flat[i] = (f_plus - f_minus) / (2.0 * step)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
