from .tensor import Tensor, TapeGraph, Node, current_tape, no_grad
from .primitives import PRIMITIVES, forward_primitive
from .optim import AdamState, adam_step, ema_update

__all__ = [
    "Tensor", "TapeGraph", "Node", "current_tape", "no_grad",
    "PRIMITIVES", "forward_primitive",
    "AdamState", "adam_step", "ema_update",
]
