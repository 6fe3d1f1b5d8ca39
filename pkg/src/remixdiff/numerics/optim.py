"""Adaptive-moment optimizer with lazily updated rows for gating tables.

Expert-coefficient logits receive gradients only for the sampled row (plus the
prior term while it is annealed), so rows with an exactly-zero gradient are
skipped entirely: their moments, step counters and values stay untouched.
Applying decayed momentum to never-sampled rows would otherwise drift them.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


class Adam:
    """Adam over a name -> Tensor parameter dict.

    Parameters named in ``lazy_rows`` must be 2D; their per-row first/second
    moments and bias-correction counters advance only on rows whose gradient
    has at least one nonzero entry.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lazy_rows: set[str] | frozenset[str] = frozenset(),
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lazy_rows = set(lazy_rows)
        for name in self.lazy_rows:
            if params[name].ndim != 2:
                raise ValueError(f"lazy-row param '{name}' must be 2D")
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.step_count = 0
        # Per-row step counters for lazy params; dense params share step_count.
        self.row_steps = {
            n: np.zeros(params[n].shape[0], dtype=np.int64) for n in self.lazy_rows
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``.

        Parameters with no gradient (None) are left untouched; for lazy-row
        parameters the same applies per row.
        """
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for '{name}'")
            if name in self.lazy_rows:
                self._step_lazy(name, p, g)
            else:
                self._step_dense(name, p, g, t)

    def _step_dense(self, name: str, p: Tensor, g: np.ndarray, t: int) -> None:
        m, v = self.m[name], self.v[name]
        m += (1.0 - self.beta1) * (g - m)
        v += (1.0 - self.beta2) * (g * g - v)
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            update = update + self.lr * self.weight_decay * p.data
        if not np.isfinite(update).all():
            raise NonFiniteError(f"non-finite update for '{name}'")
        p.data -= update.astype(p.dtype, copy=False)

    def _step_lazy(self, name: str, p: Tensor, g: np.ndarray) -> None:
        rows = np.any(g != 0.0, axis=1)
        if not rows.any():
            return
        steps = self.row_steps[name]
        steps[rows] += 1
        m, v = self.m[name], self.v[name]
        gr = g[rows]
        m[rows] += (1.0 - self.beta1) * (gr - m[rows])
        v[rows] += (1.0 - self.beta2) * (gr * gr - v[rows])
        tr = steps[rows][:, None].astype(np.float64)
        m_hat = m[rows] / (1.0 - self.beta1 ** tr)
        v_hat = v[rows] / (1.0 - self.beta2 ** tr)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if not np.isfinite(update).all():
            raise NonFiniteError(f"non-finite update for '{name}'")
        p.data[rows] -= update.astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {"step": np.asarray(self.step_count, dtype=np.int64)}
        for n in self.params:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        for n in self.lazy_rows:
            out[f"rows/{n}"] = self.row_steps[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step"])
        for n in self.params:
            self.m[n] = arrays[f"m/{n}"].copy()
            self.v[n] = arrays[f"v/{n}"].copy()
        for n in self.lazy_rows:
            self.row_steps[n] = arrays[f"rows/{n}"].copy()


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Parameters without a gradient are skipped.
    Accumulation follows dict insertion order, which is fixed per run.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
