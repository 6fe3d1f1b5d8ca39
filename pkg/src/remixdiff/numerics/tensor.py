"""Dense tensors with reverse-mode differentiation.

Small on purpose: just the ops the denoisers in this package need, backed by
numpy arrays in float32 (training) or float64 (gradient checks). Graphs are
built implicitly through parent links and torn down after every backward pass.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


# Module-level switches. Both are plain globals: graph construction is
# single-threaded by contract.
_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/sampling path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    return prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    ``_parents`` holds only the inputs that require gradients, in the order the
    op received them, so backward traversal order is deterministic. ``_bwd``
    receives the output gradient explicitly, which keeps closures free of
    reference cycles.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None
        if requires_grad:
            _check_finite(arr, "leaf")

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``self`` must be a scalar (size 1). Each node's backward rule runs
        exactly once, in reverse topological order; the order is a pure
        function of graph construction order, so repeated runs over identical
        graphs accumulate in the same sequence.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap plain values as constant Tensors, matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True) if g.dtype != t.dtype else g.copy()
    else:
        t.grad += g


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._bwd = None
    if _grad_enabled:
        parents = tuple(p for p in inputs if p.requires_grad)
        out.requires_grad = bool(parents)
        out._parents = parents
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        out._bwd = _bwd
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))
        out._bwd = _bwd
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def _bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, b.shape))
        out._bwd = _bwd
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = _result(a.data ** p, (a,), "power")
    if out.requires_grad:
        ad = a.data
        def _bwd(g):
            _accum(a, g * (p * ad ** (p - 1.0)))
        out._bwd = _bwd
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    ed = np.exp(a.data)
    out = _result(ed, (a,), "exp")
    if out.requires_grad:
        def _bwd(g):
            _accum(a, g * ed)
        out._bwd = _bwd
    return out


def log(a, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument floored at ``floor`` to guard log(0)."""
    a = as_tensor(a)
    clipped = np.maximum(a.data, floor)
    out = _result(np.log(clipped), (a,), "log")
    if out.requires_grad:
        def _bwd(g):
            _accum(a, g / clipped)
        out._bwd = _bwd
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    # Clip keeps exp in range; sigmoid saturates to 0/1 well before +-60.
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
    out = _result(a.data * sig, (a,), "silu")
    if out.requires_grad:
        ad = a.data
        def _bwd(g):
            _accum(a, g * (sig * (1.0 + ad * (1.0 - sig))))
        out._bwd = _bwd
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = as_tensor(a)
    ad = a.data
    inner = _GELU_C * (ad + 0.044715 * ad ** 3)
    t = np.tanh(inner)
    out = _result(0.5 * ad * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        def _bwd(g):
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * ad ** 2)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * ad * (1.0 - t ** 2) * d_inner))
        out._bwd = _bwd
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        orig = a.shape
        def _bwd(g):
            _accum(a, g.reshape(orig))
        out._bwd = _bwd
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        def _bwd(g):
            _accum(a, np.transpose(g, inv))
        out._bwd = _bwd
    return out


def index(a, idx) -> Tensor:
    """Slice or gather; integer-array indices accumulate duplicates on backward."""
    a = as_tensor(a)
    out = _result(a.data[idx], (a,), "index")
    if out.requires_grad:
        shape, dtype = a.shape, a.dtype
        def _bwd(g):
            buf = np.zeros(shape, dtype=dtype)
            np.add.at(buf, idx, g)
            _accum(a, buf)
        out._bwd = _bwd
    return out


def concat(parts: list, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat")
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        def _bwd(g):
            offset = 0
            for p, s in zip(parts, sizes):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offset, offset + s)
                    _accum(p, g[tuple(sl)])
                offset += s
        out._bwd = _bwd
    return out


# -- reductions ----------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        shape = a.shape
        def _bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, shape).astype(a.dtype, copy=False))
        out._bwd = _bwd
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        shape = a.shape
        count = a.size if axis is None else np.prod(
            [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )
        inv = 1.0 / float(count)
        def _bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g * inv, shape).astype(a.dtype, copy=False))
        out._bwd = _bwd
    return out


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects ndim >= 2, got {a.shape} @ {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def _bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, bd.swapaxes(-1, -2))
                _accum(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(ad.swapaxes(-1, -2), g)
                _accum(b, _unbroadcast(gb, b.shape))
        out._bwd = _bwd
    return out


def linear(x, w, b=None) -> Tensor:
    """y = x @ w (+ b). Weights stored (in_features, out_features)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, (a,), "softmax")
    if out.requires_grad:
        def _bwd(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(a, s * (g - dot))
        out._bwd = _bwd
    return out


def layernorm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with optional affine parameters."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    out = _result(y, inputs, "layernorm")
    if out.requires_grad:
        gdata = gamma.data if gamma is not None else None
        def _bwd(g):
            if beta is not None and beta.requires_grad:
                _accum(beta, _unbroadcast(g, beta.shape))
            if gamma is not None and gamma.requires_grad:
                _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
            if x.requires_grad:
                gx = g * gdata if gdata is not None else g
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (gx - m1 - xhat * m2))
        out._bwd = _bwd
    return out


def mix(coeffs, widened) -> Tensor:
    """Weighted sum over the leading basis axis: out = sum_k coeffs[k] * widened[k].

    The backward rule gives the two gradients the mixing mechanism needs:
    d/d(widened[k]) = coeffs[k] * g and d/d(coeffs[k]) = <g, widened[k]>.
    """
    coeffs, widened = as_tensor(coeffs), as_tensor(widened)
    if coeffs.ndim != 1 or coeffs.shape[0] != widened.shape[0]:
        raise ValueError(
            f"mix expects coeffs (K,) matching widened leading axis, "
            f"got {coeffs.shape} and {widened.shape}"
        )
    out = _result(np.tensordot(coeffs.data, widened.data, axes=(0, 0)), (coeffs, widened), "mix")
    if out.requires_grad:
        cd, wd = coeffs.data, widened.data
        k = cd.shape[0]
        def _bwd(g):
            if widened.requires_grad:
                _accum(widened, cd.reshape((k,) + (1,) * g.ndim) * g[None])
            if coeffs.requires_grad:
                _accum(coeffs, wd.reshape(k, -1) @ g.reshape(-1))
        out._bwd = _bwd
    return out


# -- embeddings ------------------------------------------------------------------


def sinusoidal_embed(t, dim: int, dtype=np.float32, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal timestep features: [sin(t*w_i), cos(t*w_i)] for log-spaced w_i.

    ``t`` is a scalar or (B,) array of timesteps; output is a constant tensor of
    shape (dim,) or (B, dim). ``dim`` must be even.
    """
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal embed dim must be even, got {dim}")
    tv = np.asarray(t, dtype=np.float64)
    scalar = tv.ndim == 0
    tv = np.atleast_1d(tv)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = tv[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(dtype)
    return Tensor(emb[0] if scalar else emb)


def mse(a, b) -> Tensor:
    """Mean over leading axis of the squared L2 norm over remaining axes."""
    d = sub(a, b)
    sq = mul(d, d)
    if sq.ndim == 1:
        return reduce_mean(sq)
    per_item = reduce_sum(reshape(sq, (sq.shape[0], -1)), axis=1)
    return reduce_mean(per_item)
