#!/usr/bin/env python3
"""Diagnostics of a trained mixed-expert model: coefficient structure and
per-timestep expert losses.

Shows the two signature patterns: adjacent intervals learn similar
coefficients, and each expert is strongest on its own timestep range.
Exports coefficients.csv and losses.csv into demos/out/.
"""

import os

import numpy as np

from remixdiff import evalbench, remix, training
from remixdiff.denoiser import ModelConfig
from remixdiff.diffusion import build_schedule

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

T, N, K = 100, 8, 4
sched = build_schedule(T=T, beta_end=0.2)
data = evalbench.make_dataset("gauss8", 8000, seed=0)

train_cfg = training.TrainConfig(
    total_steps=9000, batch_size=128, learning_rate=1e-3, seed=0,
    gamma0=0.1, anneal_steps=4500, n_experts=N, n_basis=K,
)
state = training.init_train_state(train_cfg, ModelConfig.mlp_default(data_dim=2), sched)
print(f"training K={K} bases into N={N} experts for {train_cfg.total_steps} steps")
training.train(state, data)

bundle = training.bundle_from_state(state)
coeffs = remix.coefficient_matrix(bundle.mixer)
print("\ncoefficients (rows = experts, low t at the top):")
print(np.round(coeffs, 3))

adj, far = evalbench.adjacent_vs_distant_cosine(coeffs)
print(f"\nadjacent-row cosine {adj:.3f} vs rows N/2 apart {far:.3f} "
      "(neighboring intervals share their mixture)")

grid = evalbench.loss_by_timestep(bundle, evalbench.make_dataset("gauss8", 4096, 1),
                                  t_per_interval=8, batch=512)
print("\nloss grid (rows = experts, columns = intervals):")
with np.printoptions(precision=3, suppress=True):
    print(grid.matrix)
print(f"diagonal mean {grid.diagonal_mean():.4f} vs "
      f"off-diagonal (|i-j|>=2) mean {grid.offdiagonal_mean():.4f}")

evalbench.export_coefficients(bundle, os.path.join(OUT, "coefficients.csv"))
evalbench.write_losses_csv(os.path.join(OUT, "losses.csv"), grid)
print(f"\nwrote {OUT}/coefficients.csv and {OUT}/losses.csv")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    im0 = axes[0].imshow(coeffs.T, aspect="auto", cmap="viridis")
    axes[0].set_xlabel("expert / interval")
    axes[0].set_ylabel("basis")
    axes[0].set_title("mixing coefficients")
    fig.colorbar(im0, ax=axes[0])
    im1 = axes[1].imshow(np.log10(grid.matrix), aspect="auto", cmap="magma")
    axes[1].set_xlabel("evaluated interval")
    axes[1].set_ylabel("expert")
    axes[1].set_title("log10 loss by timestep")
    fig.colorbar(im1, ax=axes[1])
    fig.tight_layout()
    png = os.path.join(OUT, "diagnostics.png")
    fig.savefig(png, dpi=130)
    print("wrote", png)
except ImportError:
    print("matplotlib not installed; skipped heatmaps")
