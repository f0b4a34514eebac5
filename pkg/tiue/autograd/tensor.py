import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from ..errors import NotScalar, InvalidAttr
from ..logs import error_and_raise

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def _tape_stack() -> List[Optional["TapeGraph"]]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Optional["TapeGraph"]:
    """The tape recording on this thread, or None. Tapes never cross threads."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on the current thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """
    A dense row-major array plus the bookkeeping reverse-mode differentiation needs.

    `node` is the tape record that produced this tensor, or None for leaves.
    Parameters are leaves with `requires_grad=True`.
    """
    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in SUPPORTED_DTYPES else np.float32
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # Operators cover the combinations the samplers use: tensor (+|-|*) tensor and tensor * scalar.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return _apply("add", [self, other])
        return _apply("add_scalar", [self], {"scalar": float(other)})

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _apply("sub", [self, other])
        return _apply("add_scalar", [self], {"scalar": -float(other)})

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _apply("mul", [self, other])
        return _apply("mul_scalar", [self], {"scalar": float(other)})

    __rmul__ = __mul__

    def __neg__(self):
        return _apply("mul_scalar", [self], {"scalar": -1.0})

    def __truediv__(self, other):
        return _apply("mul_scalar", [self], {"scalar": 1.0 / float(other)})


def _apply(kind: str, inputs: List[Tensor], attrs: Dict[str, Any] | None = None) -> Tensor:
    from .primitives import forward_primitive
    return forward_primitive(kind, inputs, attrs)


class Node:
    """One recorded primitive application."""
    __slots__ = ("kind", "inputs", "output", "saved", "attrs", "vjp")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor, saved: Any,
                 attrs: Dict[str, Any], vjp: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.saved = saved
        self.attrs = attrs
        self.vjp = vjp


class TapeGraph:
    """
    Records primitive applications in execution order, which is a topological order.

    Use as a context manager on the training thread:

        with TapeGraph() as tape:
            loss = ...
        grads = tape.backward(loss, wrt=params)
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: List[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "TapeGraph":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_stack().pop()

    def record(self, node: Node):
        for inp in node.inputs:
            if inp.requires_grad and inp.node is None and id(inp) not in self._leaf_ids:
                self._leaf_ids.add(id(inp))
                self.leaves.append(inp)
        self.nodes.append(node)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Dict[Tensor, Tensor]:
        """
        Exact reverse-mode gradients of a scalar `loss`.

        :param loss: A single-element tensor produced on this tape.
        :param wrt: Leaves to report. Defaults to every parameter leaf the tape saw.
        :return: Gradient per leaf; leaves the loss does not reach get zeros.
        """
        if loss.size != 1:
            error_and_raise(f"backward needs a scalar loss, got shape {loss.shape}", NotScalar)

        grads: Dict[int, np.ndarray] = {}
        if loss.node is not None:
            if loss.node not in self.nodes:
                error_and_raise("loss was not recorded on this tape", InvalidAttr)
            grads[id(loss)] = np.ones_like(loss.data)

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

        targets = list(wrt) if wrt is not None else self.leaves
        return {
            leaf: Tensor(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=leaf.dtype)
            for leaf in targets
        }

    def gradients(self, loss: Tensor, named: Mapping[str, Tensor]) -> Dict[str, Tensor]:
        """`backward` keyed by parameter name."""
        by_leaf = self.backward(loss, wrt=named.values())
        return {name: by_leaf[t] for name, t in named.items()}

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs and compare with the stored output."""
        from .primitives import PRIMITIVES

        for node in self.nodes:
            out, _ = PRIMITIVES[node.kind].forward([t.data for t in node.inputs], node.attrs)
            if out.shape != node.output.shape or not np.array_equal(out, node.output.data):
                return False
        return True
