"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                     step: float = 1e-5) -> list:
    """Central differences of scalar ``fn(*tensors)`` with respect to each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = base[idx]
            base[idx] = orig + step
            plus = fn(*[Tensor(a) for a in arrays]).item()
            base[idx] = orig - step
            minus = fn(*[Tensor(a) for a in arrays]).item()
            base[idx] = orig
            g[idx] = (plus - minus) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out)
    return [grads[t.node_id].data if t.node_id in grads else np.zeros_like(t.data) for t in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` with a floor that keeps zero-vs-zero at 0."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    step: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients."""
    analytic = analytic_gradient(fn, arrays)
    numeric = numeric_gradient(fn, arrays, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def param_gradient_error(loss_fn: Callable[[Dict[str, Tensor]], Tensor],
                         params: Dict[str, np.ndarray], names: Sequence[str],
                         samples: int = 12, step: float = 1e-5,
                         rng: np.random.Generator | None = None) -> float:
    """Spot-check parameter gradients of a network loss on random coordinates.

    Checking every coordinate of a large network is quadratic in its size;
    this samples ``samples`` coordinates per named parameter instead and
    compares them as one vector.
    """
    rng = rng or np.random.default_rng(0)
    leaves = {k: Tensor(v, requires_grad=k in names) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
    grads = tape.gradient(loss, {k: leaves[k] for k in names})
    ana, num = [], []
    for name in names:
        base = np.array(params[name], dtype=np.float64)
        for flat in rng.choice(base.size, size=min(samples, base.size), replace=False):
            idx = np.unravel_index(flat, base.shape)
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * step
                trial = {k: Tensor(v) for k, v in params.items()}
                trial[name] = Tensor(pert)
                vals.append(loss_fn(trial).item())
            num.append((vals[0] - vals[1]) / (2 * step))
            ana.append(grads[name][idx])
    return relative_error(np.array(ana), np.array(num))
