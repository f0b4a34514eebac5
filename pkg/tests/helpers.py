"""Finite-difference gradient checking shared by the autograd and model tests."""
from typing import Callable, Dict

import numpy as np

from tiue.autograd import Tensor, TapeGraph
from tiue.autograd import primitives as P


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of `f` with respect to every element of `x` (perturbed in place, then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def gradcheck(fn: Callable[..., Tensor], inputs: Dict[str, np.ndarray], eps: float = 1e-6, seed: int = 0) -> float:
    """
    Largest relative error between tape gradients and central differences of
    sum(fn(**inputs) * r) for a fixed random projection r. Inputs are used as float64.
    """
    names = list(inputs)
    leaves = {n: Tensor(np.array(inputs[n], dtype=np.float64), requires_grad=True) for n in names}
    with TapeGraph() as tape:
        out = fn(**leaves)
        r = Tensor(np.random.default_rng(seed).standard_normal(out.shape), dtype=np.float64)
        loss = P.sum_(out * r)
    grads = tape.gradients(loss, leaves)

    def f() -> float:
        return float(np.sum(fn(**{m: Tensor(leaves[m].data) for m in names}).data * r.data))

    return max(relative_error(grads[n].data, numerical_gradient(f, leaves[n].data, eps)) for n in names)
