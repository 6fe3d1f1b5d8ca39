"""Synthetic datasets, distribution metrics, expert diagnostics and the
runtime-mixing vs precomputed latency benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import remix
from .denoiser import plain_provider, precomputed_provider, runtime_mix_provider
from .diffusion import forward_diffuse
from .numerics import no_grad

DATASET_KINDS = ("gauss8", "checkerboard", "tinyshapes")


@dataclass
class SyntheticDataset:
    kind: str
    samples: np.ndarray            # (n, d) float32
    labels: np.ndarray | None      # (n,) int64 or None
    seed: int

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


def gauss8_centers() -> np.ndarray:
    """Eight component means on the unit circle at 45-degree spacing."""
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_dataset(kind: str, n: int, seed: int = 0) -> SyntheticDataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "gauss8":
        centers = gauss8_centers()
        labels = rng.integers(0, 8, size=n)
        samples = centers[labels] + 0.05 * rng.standard_normal((n, 2))
        return SyntheticDataset(kind, samples.astype(np.float32), labels.astype(np.int64), seed)
    if kind == "checkerboard":
        x1 = rng.uniform(-2.0, 2.0, size=n)
        x2 = rng.uniform(0.0, 1.0, size=n) - rng.integers(0, 2, size=n) * 2.0
        x2 = x2 + np.floor(x1) % 2
        samples = np.stack([x1, x2], axis=1)
        return SyntheticDataset(kind, samples.astype(np.float32), None, seed)
    if kind == "tinyshapes":
        return _make_tinyshapes(n, rng, seed)
    raise ValueError(f"unknown dataset kind '{kind}'")


def _make_tinyshapes(n: int, rng: np.random.Generator, seed: int) -> SyntheticDataset:
    """8x8 grayscale shapes in [-1, 1]: disk, hollow square, cross, corner dot.
    Each sample gets a 1-pixel center jitter plus mild value noise."""
    side = 8
    yy, xx = np.mgrid[0:side, 0:side]
    labels = rng.integers(0, 4, size=n)
    jitter = rng.integers(-1, 2, size=(n, 2))
    imgs = np.full((n, side, side), -1.0, dtype=np.float64)
    for idx in range(n):
        cy, cx = 3.5 + jitter[idx, 0], 3.5 + jitter[idx, 1]
        lab = labels[idx]
        if lab == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= 2.5 ** 2
        elif lab == 1:
            dy, dx = np.abs(yy - cy), np.abs(xx - cx)
            mask = (np.maximum(dy, dx) <= 2.5) & (np.maximum(dy, dx) >= 1.5)
        elif lab == 2:
            mask = (np.abs(yy - cy) <= 0.6) | (np.abs(xx - cx) <= 0.6)
        else:
            mask = (yy - (cy - 2)) ** 2 + (xx - (cx - 2)) ** 2 <= 1.2 ** 2
        imgs[idx][mask] = 1.0
    imgs += 0.1 * rng.standard_normal(imgs.shape)
    imgs = np.clip(imgs, -1.0, 1.0)
    samples = imgs.reshape(n, side * side).astype(np.float32)
    return SyntheticDataset("tinyshapes", samples, labels.astype(np.int64), seed)


# -- per-timestep expert losses -----------------------------------------------------


@dataclass
class LossGrid:
    """matrix[i, j]: mean denoising loss of expert i on interval j's grid."""

    matrix: np.ndarray
    t_mid: np.ndarray              # (n_intervals,)
    t_grid: list[np.ndarray]       # evaluated timesteps per interval

    def diagonal_mean(self) -> float:
        n = min(self.matrix.shape)
        return float(np.mean([self.matrix[i, i] for i in range(n)]))

    def offdiagonal_mean(self, min_gap: int = 2) -> float:
        vals = [
            self.matrix[i, j]
            for i in range(self.matrix.shape[0])
            for j in range(self.matrix.shape[1])
            if abs(i - j) >= min_gap
        ]
        return float(np.mean(vals))


def _bundle_experts(bundle) -> tuple[list[dict[str, np.ndarray]], remix.IntervalPartition]:
    if bundle.kind == "plain":
        partition = remix.IntervalPartition(T=bundle.sched.T, N=1)
        return [bundle.model.plain_arrays()], partition
    experts = remix.precompute_experts(bundle.model.bank, bundle.mixer, bundle.partition)
    return experts, bundle.partition


def loss_by_timestep(
    bundle,
    dataset: SyntheticDataset,
    t_grid: np.ndarray | None = None,
    t_per_interval: int = 5,
    batch: int = 256,
    seed: int = 0,
    n_intervals: int | None = None,
) -> LossGrid:
    """Evaluate every materialized expert on every interval of the chain.

    The evaluation batch and per-timestep noise draws are fixed from ``seed``,
    so grids are reproducible bit for bit from (checkpoint, seed).
    ``n_intervals`` overrides the grid's interval count (useful to score a
    plain model on the same grid as an N-expert one).
    """
    experts, expert_partition = _bundle_experts(bundle)
    sched = bundle.sched
    cfg = bundle.model_cfg
    partition = (
        remix.IntervalPartition(T=sched.T, N=n_intervals)
        if n_intervals is not None
        else expert_partition
    )
    N = partition.N

    if t_grid is None:
        groups = []
        for j in range(N):
            lo, hi = remix.interval_bounds(partition, j)
            count = min(t_per_interval, hi - lo)
            ts = np.unique(np.linspace(lo, hi - 1, count).round().astype(np.int64))
            groups.append(ts)
    else:
        t_grid = np.asarray(t_grid, dtype=np.int64)
        if (t_grid < 0).any() or (t_grid >= sched.T).any():
            raise ValueError(f"t_grid entries must lie in [0, {sched.T})")
        groups = [np.sort(t_grid[[remix.interval_of(int(t), partition) == j for t in t_grid]])
                  for j in range(N)]

    rng = np.random.default_rng(seed)
    take = min(batch, dataset.samples.shape[0])
    idx = rng.choice(dataset.samples.shape[0], size=take, replace=False)
    x0 = dataset.samples[idx]
    labels = dataset.labels[idx] if (dataset.labels is not None and cfg.num_classes > 0) else None
    eps_per_t = {int(t): rng.standard_normal(x0.shape).astype(np.float32)
                 for j in range(N) for t in groups[j]}

    matrix = np.zeros((len(experts), N), dtype=np.float64)
    with no_grad():
        for i, params in enumerate(experts):
            provider = plain_provider(cfg, params)
            for j in range(N):
                losses = []
                for t in groups[j]:
                    eps = eps_per_t[int(t)]
                    x_t = forward_diffuse(x0, int(t), eps, sched)
                    pred = provider(x_t, int(t), labels)
                    losses.append(float(np.mean(np.sum((eps - pred) ** 2, axis=1))))
                matrix[i, j] = np.mean(losses)
    if not np.isfinite(matrix).all() or (matrix < 0).any():
        raise ArithmeticError("loss grid contains non-finite or negative entries")
    t_mid = np.array([
        (remix.interval_bounds(partition, j)[0] + remix.interval_bounds(partition, j)[1] - 1) / 2.0
        for j in range(N)
    ])
    return LossGrid(matrix=matrix, t_mid=t_mid, t_grid=groups)


def mean_serving_loss(
    bundle, dataset: SyntheticDataset, t_per_interval: int = 5,
    batch: int = 256, seed: int = 0, n_intervals: int | None = None,
) -> float:
    """Mean per-interval denoising loss of the model as it would serve the
    chain: the grid diagonal for a mixed model, the (single) row for a plain
    model. ``n_intervals`` pins the grid so both kinds score the same points."""
    grid = loss_by_timestep(bundle, dataset, t_per_interval=t_per_interval,
                            batch=batch, seed=seed, n_intervals=n_intervals)
    if bundle.kind == "plain":
        return float(np.mean(grid.matrix[0]))
    if grid.matrix.shape[0] != grid.matrix.shape[1]:
        raise ValueError("serving loss of a mixed model needs a square grid")
    return float(np.mean(np.diag(grid.matrix)))


def write_losses_csv(path: str, grid: LossGrid) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "interval", "t_mid", "loss"])
        for i in range(grid.matrix.shape[0]):
            for j in range(grid.matrix.shape[1]):
                writer.writerow([i, j, grid.t_mid[j], repr(float(grid.matrix[i, j]))])


def export_coefficients(bundle, path: str) -> None:
    """coefficients.csv for a trained checkpoint (schema owned by the mixing
    module)."""
    if bundle.kind != "remix":
        raise ValueError("coefficient export needs a mixed-model checkpoint")
    remix.write_coefficients_csv(path, bundle.mixer, bundle.partition)


def adjacent_vs_distant_cosine(coeffs: np.ndarray) -> tuple[float, float]:
    """Mean cosine similarity of adjacent coefficient rows vs rows N//2 apart."""
    N = coeffs.shape[0]
    gap = N // 2

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(a @ b / (na * nb))

    adjacent = np.mean([cos(coeffs[i], coeffs[i + 1]) for i in range(N - 1)])
    distant = np.mean([cos(coeffs[i], coeffs[i + gap]) for i in range(N - gap)])
    return float(adjacent), float(distant)


# -- sliced Wasserstein ---------------------------------------------------------------


def sliced_wasserstein(
    a: np.ndarray, b: np.ndarray, n_proj: int = 128, seed: int = 0
) -> float:
    """Mean 1D Wasserstein-1 distance between ``a`` and ``b`` over random unit
    projection directions. Unequal sample counts are aligned on a common
    quantile grid."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("sliced_wasserstein needs non-empty sample sets")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible sample shapes {a.shape} and {b.shape}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = a @ dirs.T
    pb = b @ dirs.T
    if a.shape[0] == b.shape[0]:
        da = np.sort(pa, axis=0)
        db = np.sort(pb, axis=0)
    else:
        q = (np.arange(max(a.shape[0], b.shape[0])) + 0.5) / max(a.shape[0], b.shape[0])
        da = np.quantile(pa, q, axis=0)
        db = np.quantile(pb, q, axis=0)
    return float(np.mean(np.abs(da - db)))


# -- latency benchmark -------------------------------------------------------------


@dataclass
class BenchResult:
    mode: str
    mean_ms: float
    p50_ms: float
    p95_ms: float
    batch: int
    K: int
    N: int
    outputs: np.ndarray            # stacked predictions from the measured reps


def bench_latency(
    bundle,
    mode: str,
    batch: int = 16,
    reps: int = 100,
    warmup: int = 20,
    seed: int = 0,
) -> BenchResult:
    """Wall-clock per denoise step for one inference mode.

    Precomputation happens before the timed region; runtime mixing happens
    inside every call. Inputs are derived from ``seed`` only, so both modes see
    identical work.
    """
    if bundle.kind != "remix":
        raise ValueError("latency benchmark needs a mixed-model checkpoint")
    if mode == "precomputed":
        experts = remix.precompute_experts(bundle.model.bank, bundle.mixer, bundle.partition)
        provider = precomputed_provider(bundle.model_cfg, experts, bundle.partition)
    elif mode == "runtime-mix":
        provider = runtime_mix_provider(bundle.model, bundle.mixer, bundle.partition)
    else:
        raise ValueError(f"unknown benchmark mode '{mode}'")

    rng = np.random.default_rng(seed)
    dim = bundle.model_cfg.sample_dim
    x = rng.standard_normal((batch, dim)).astype(np.float32)
    # Cycle timesteps across all intervals so every expert is exercised.
    ts = [int(t) for t in np.linspace(0, bundle.sched.T - 1, bundle.partition.N * 2).round()]

    for r in range(warmup):
        provider(x, ts[r % len(ts)], None)
    times = np.empty(reps, dtype=np.float64)
    outs = []
    for r in range(reps):
        t = ts[r % len(ts)]
        start = time.perf_counter()
        out = provider(x, t, None)
        times[r] = time.perf_counter() - start
        outs.append(out)
    times_ms = times * 1e3
    return BenchResult(
        mode=mode,
        mean_ms=float(times_ms.mean()),
        p50_ms=float(np.percentile(times_ms, 50)),
        p95_ms=float(np.percentile(times_ms, 95)),
        batch=batch,
        K=bundle.model.K,
        N=bundle.partition.N,
        outputs=np.stack(outs),
    )


def write_bench_csv(path: str, results: list[BenchResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "mean_ms", "p50_ms", "p95_ms", "batch", "K", "N"])
        for r in results:
            writer.writerow(
                [r.mode, f"{r.mean_ms:.6f}", f"{r.p50_ms:.6f}", f"{r.p95_ms:.6f}",
                 r.batch, r.K, r.N]
            )
