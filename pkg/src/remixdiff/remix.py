"""Crafting timestep experts by mixing basis models.

K basis parameter sets are stored as K-widened tensors (leading axis K).
Expert i serving timestep interval i is the weighted average of the bases
under a length-K coefficient vector: theta_i = sum_k alpha_ik * basis_k.
Coefficients come from a learnable logit table (softmax or raw kind) or from
fixed indicator rows (onehot kind, the manual-assignment baseline).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MIXER_KINDS = ("onehot", "raw", "softmax")
MIXER_SCOPES = ("global", "local")


@dataclass(frozen=True)
class IntervalPartition:
    """Half-open equal split of [0, T) into N intervals; the last interval
    absorbs the remainder when N does not divide T."""

    T: int
    N: int

    def __post_init__(self):
        if not (1 <= self.N <= self.T):
            raise ValueError(f"require 1 <= N <= T, got N={self.N}, T={self.T}")

    @property
    def width(self) -> int:
        return self.T // self.N


def interval_of(t: int, partition: IntervalPartition) -> int:
    """Expert index serving timestep ``t``."""
    if not (0 <= t < partition.T):
        raise ValueError(f"timestep {t} out of range [0, {partition.T})")
    return min(int(t) // partition.width, partition.N - 1)


def interval_bounds(partition: IntervalPartition, i: int) -> tuple[int, int]:
    """[t_low, t_high) owned by expert ``i``; the last interval ends at T."""
    if not (0 <= i < partition.N):
        raise ValueError(f"expert index {i} out of range [0, {partition.N})")
    w = partition.width
    lo = i * w
    hi = (i + 1) * w if i < partition.N - 1 else partition.T
    return lo, hi


def onehot_basis_index(i: int, N: int, K: int) -> int:
    """Sequential block assignment of bases to intervals: floor(i * K / N)."""
    return (i * K) // N


class BasisBank:
    """K parameter sets stored as K-widened tensors, one per layer.

    ``layers`` maps parameter name -> Tensor of shape (K, *base_shape). Names
    listed in ``shared`` opted out of mixing and hold plain base-shaped tensors
    used identically by every expert.
    """

    def __init__(self, K: int, layers: dict[str, Tensor], shared: dict[str, Tensor] | None = None):
        if K < 1:
            raise ValueError(f"K must be >= 1, got {K}")
        for name, t in layers.items():
            if t.shape[0] != K:
                raise ValueError(f"layer '{name}' leading axis {t.shape[0]} != K={K}")
        self.K = K
        self.layers = layers
        self.shared = shared or {}

    @property
    def per_basis_count(self) -> int:
        """P: parameter count of one basis (shared tensors count once)."""
        mixed = sum(t.size // self.K for t in self.layers.values())
        return mixed + sum(t.size for t in self.shared.values())

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.layers)
        out.update(self.shared)
        return out

    def basis_slice(self, k: int) -> dict[str, np.ndarray]:
        """Plain parameter dict of basis ``k`` (copies), shared tensors included."""
        if not (0 <= k < self.K):
            raise ValueError(f"basis index {k} out of range [0, {self.K})")
        params = {name: t.data[k].copy() for name, t in self.layers.items()}
        params.update({name: t.data.copy() for name, t in self.shared.items()})
        return params


class MixerTable:
    """Learnable mixing logits: one (N, K) table (global scope) or one table
    per mixed layer (local scope). The onehot kind stores no learnables."""

    def __init__(
        self,
        kind: str,
        scope: str,
        N: int,
        K: int,
        logits: Tensor | dict[str, Tensor] | None,
    ):
        if kind not in MIXER_KINDS:
            raise ValueError(f"unknown mixer kind '{kind}'")
        if scope not in MIXER_SCOPES:
            raise ValueError(f"unknown mixer scope '{scope}'")
        if kind == "onehot" and logits is not None:
            raise ValueError("onehot mixer stores no learnable logits")
        if kind != "onehot":
            if scope == "global" and not isinstance(logits, Tensor):
                raise ValueError("global mixer requires a single (N, K) logits tensor")
            if scope == "local" and not isinstance(logits, dict):
                raise ValueError("local mixer requires one logits tensor per layer")
        self.kind = kind
        self.scope = scope
        self.N = N
        self.K = K
        self.logits = logits

    def trainable(self) -> dict[str, Tensor]:
        if self.kind == "onehot":
            return {}
        if self.scope == "global":
            return {"mixer/logits": self.logits}
        return {f"mixer/logits/{name}": t for name, t in self.logits.items()}

    def logits_for(self, layer: str | None) -> Tensor:
        if self.kind == "onehot":
            raise ValueError("onehot mixer has no logits")
        if self.scope == "global":
            return self.logits
        if layer is None:
            raise ValueError("local mixer needs a layer name")
        return self.logits[layer]


def create_mixer(
    kind: str,
    scope: str,
    N: int,
    K: int,
    rng: np.random.Generator,
    layer_names: list[str] | None = None,
    dtype=np.float32,
    init_std: float = 0.02,
) -> MixerTable:
    """Randomly initialized mixer. Raw kind starts near the uniform average
    1/K so early experts are sensible without a constraint."""
    def one_table() -> Tensor:
        base = 1.0 / K if kind == "raw" else 0.0
        vals = base + init_std * rng.standard_normal((N, K))
        return Tensor(vals.astype(dtype), requires_grad=True)

    if kind == "onehot":
        return MixerTable(kind, scope, N, K, None)
    if scope == "global":
        return MixerTable(kind, scope, N, K, one_table())
    if not layer_names:
        raise ValueError("local mixer needs the mixed layer names")
    return MixerTable(kind, scope, N, K, {name: one_table() for name in layer_names})


def coefficient_rows(mixer: MixerTable, layer: str | None = None) -> Tensor:
    """Full (N, K) coefficient matrix as a graph tensor (softmax applied for
    the softmax kind; indicator rows for onehot)."""
    if mixer.kind == "onehot":
        rows = np.zeros((mixer.N, mixer.K), dtype=np.float32)
        for i in range(mixer.N):
            rows[i, onehot_basis_index(i, mixer.N, mixer.K)] = 1.0
        return Tensor(rows)
    logits = mixer.logits_for(layer)
    if mixer.kind == "raw":
        return logits
    return nx.softmax(logits, axis=-1)


def coefficients(mixer: MixerTable, i: int, layer: str | None = None) -> Tensor:
    """Length-K coefficient vector of expert ``i`` (graph-tracked when learnable)."""
    if not (0 <= i < mixer.N):
        raise ValueError(f"expert index {i} out of range [0, {mixer.N})")
    if mixer.kind == "onehot":
        row = np.zeros(mixer.K, dtype=np.float32)
        row[onehot_basis_index(i, mixer.N, mixer.K)] = 1.0
        return Tensor(row)
    logits = mixer.logits_for(layer)
    row = nx.index(logits, i)
    if mixer.kind == "raw":
        return row
    return nx.softmax(row, axis=-1)


def coefficient_matrix(mixer: MixerTable, layer: str | None = None) -> np.ndarray:
    """(N, K) coefficient values as plain float64, outside the graph."""
    if mixer.kind == "onehot" or mixer.scope == "global" or layer is not None:
        with nx.no_grad():
            return coefficient_rows(mixer, layer).data.astype(np.float64)
    # Local scope without a layer: average over layers (export convenience).
    mats = [coefficient_matrix(mixer, name) for name in mixer.logits]
    return np.mean(mats, axis=0)


def materialize_expert(
    bank: BasisBank, alpha: np.ndarray | dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Plain parameter set theta = sum_k alpha[k] * basis_k (per layer).

    ``alpha`` is one length-K vector, or one vector per layer for local-scope
    mixers. Shared (unmixed) tensors are copied through.
    """
    def vec_for(name: str) -> np.ndarray:
        v = np.asarray(alpha[name] if isinstance(alpha, dict) else alpha)
        if v.shape != (bank.K,):
            raise ValueError(f"alpha for '{name}' must have shape ({bank.K},), got {v.shape}")
        return v

    params = {}
    for name, t in bank.layers.items():
        v = vec_for(name).astype(t.dtype, copy=False)
        params[name] = np.tensordot(v, t.data, axes=(0, 0))
    for name, t in bank.shared.items():
        params[name] = t.data.copy()
    return params


def mixed_linear_forward(x, widened_w: Tensor, widened_b: Tensor | None, alpha) -> Tensor:
    """Linear layer over basis-averaged weights: y = x @ (sum_k a_k W_k) + sum_k a_k b_k.

    Gradients flow to the inputs, the widened weights and the coefficients.
    """
    alpha = nx.as_tensor(alpha, widened_w)
    w = nx.mix(alpha, widened_w)
    b = nx.mix(alpha, widened_b) if widened_b is not None else None
    return nx.linear(x, w, b)


def analytic_coeff_grad(grad_theta: dict[str, np.ndarray], bank: BasisBank) -> np.ndarray:
    """Coefficient gradient from an expert-parameter gradient: entry k is the
    inner product of grad_theta with basis k over every mixed element."""
    out = np.zeros(bank.K, dtype=np.float64)
    for name, t in bank.layers.items():
        g = grad_theta.get(name)
        if g is None:
            continue
        if g.shape != t.shape[1:]:
            raise ValueError(
                f"grad for '{name}' has shape {g.shape}, expected {t.shape[1:]}"
            )
        out += t.data.reshape(bank.K, -1).astype(np.float64) @ g.reshape(-1).astype(np.float64)
    return out


def precompute_experts(
    bank: BasisBank, mixer: MixerTable, partition: IntervalPartition
) -> list[dict[str, np.ndarray]]:
    """Materialize all N experts once so inference never mixes at runtime."""
    if mixer.N != partition.N:
        raise ValueError(f"mixer N={mixer.N} does not match partition N={partition.N}")
    experts = []
    with nx.no_grad():
        for i in range(partition.N):
            if mixer.kind != "onehot" and mixer.scope == "local":
                alpha = {
                    name: coefficients(mixer, i, name).data for name in bank.layers
                }
            else:
                alpha = coefficients(mixer, i).data
            experts.append(materialize_expert(bank, alpha))
    return experts


def size_audit(bank: BasisBank, N: int) -> dict[str, int]:
    """Stored-value counts: K*P for the bank vs N*P for N precomputed experts."""
    P = bank.per_basis_count
    return {"per_basis": P, "bank_values": bank.K * P, "expert_values": N * P}


def write_coefficients_csv(path: str, mixer: MixerTable, partition: IntervalPartition) -> None:
    """CSV export: header expert,t_low,t_high,coef_0..coef_{K-1}; one row per
    expert. Softmax rows are post-softmax; local-scope tables export the mean
    coefficient over layers."""
    mat = coefficient_matrix(mixer)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["expert", "t_low", "t_high"] + [f"coef_{k}" for k in range(mixer.K)]
        )
        for i in range(mixer.N):
            lo, hi = interval_bounds(partition, i)
            writer.writerow([i, lo, hi] + [repr(float(v)) for v in mat[i]])
