"""Central finite-difference gradient verification.

The probe only ever calls the loss forward, so it stays independent of the
backward implementation it is checking. Run everything here in float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor

DEFAULT_H = 1e-4
DEFAULT_TOL = 1e-3


def finite_difference_grads(
    loss_fn: Callable[[], float],
    arrays: dict[str, np.ndarray],
    h: float = DEFAULT_H,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of every array.

    ``loss_fn`` must read the (float64) arrays by reference; entries are
    perturbed in place and restored.
    """
    grads: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ValueError(f"finite differences require float64, '{name}' is {arr.dtype}")
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error: |a-b| / max(|a|, |b|), 0 when both vanish."""
    na = float(np.linalg.norm(np.asarray(a, dtype=np.float64).reshape(-1)))
    nb = float(np.linalg.norm(np.asarray(b, dtype=np.float64).reshape(-1)))
    diff = float(
        np.linalg.norm(
            np.asarray(a, dtype=np.float64).reshape(-1)
            - np.asarray(b, dtype=np.float64).reshape(-1)
        )
    )
    denom = max(na, nb)
    if denom == 0.0:
        return 0.0
    return diff / denom


def check_gradients(
    build_loss: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
) -> list[tuple[str, float, bool]]:
    """Compare autodiff gradients of ``build_loss`` against central differences.

    Returns one (name, relative_error, ok) row per parameter. ``build_loss``
    is called fresh for every evaluation so the graph never carries over.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"gradient checks run in float64, '{name}' is {p.dtype}")

    loss = build_loss(params)
    for p in params.values():
        p.grad = None
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    def scalar_loss() -> float:
        return build_loss(params).item()

    numeric = finite_difference_grads(scalar_loss, {n: p.data for n, p in params.items()}, h=h)
    report = []
    for name in params:
        err = relative_error(analytic[name], numeric[name])
        report.append((name, err, err <= tol))
    return report
