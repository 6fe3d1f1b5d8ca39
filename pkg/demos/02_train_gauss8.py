#!/usr/bin/env python3
"""Train a small mixed-expert denoiser on the 8-Gaussian toy data and sample.

Takes a couple of minutes on a laptop CPU. Writes samples.csv (and a scatter
plot when matplotlib is available) into demos/out/.
"""

import os

import numpy as np

from remixdiff import evalbench, remix, training
from remixdiff.denoiser import ModelConfig, precomputed_provider
from remixdiff.diffusion import SamplerConfig, build_schedule, sample

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

T = 100
sched = build_schedule(T=T, beta_end=0.2)
data = evalbench.make_dataset("gauss8", 8000, seed=0)

model_cfg = ModelConfig.mlp_default(data_dim=2)
train_cfg = training.TrainConfig(
    total_steps=6000, batch_size=128, learning_rate=1e-3, seed=0,
    gamma0=0.1, anneal_steps=3000, n_experts=4, n_basis=2,
)
state = training.init_train_state(train_cfg, model_cfg, sched)

print(f"training {train_cfg.total_steps} steps "
      f"(N={train_cfg.n_experts} experts from K={train_cfg.n_basis} bases)")
metrics = training.train(state, data)
losses = [m["loss"] for m in metrics]
print(f"loss: first 200 steps {np.mean(losses[:200]):.3f} -> "
      f"last 200 steps {np.mean(losses[-200:]):.3f}")

print("\nlearned coefficients:")
print(np.round(remix.coefficient_matrix(state.mixer), 3))

# Precompute the experts once, then run the reverse chain.
bundle = training.bundle_from_state(state)
experts = remix.precompute_experts(bundle.model.bank, bundle.mixer, bundle.partition)
provider = precomputed_provider(model_cfg, experts, bundle.partition)
samples = sample(provider, sched, SamplerConfig(n_steps=T, seed=1), 4000, (2,))

sw = evalbench.sliced_wasserstein(samples, data.samples[:4000], n_proj=128, seed=2)
print(f"\nsliced Wasserstein to training data: {sw:.4f}")
print(f"(data vs itself, two halves: "
      f"{evalbench.sliced_wasserstein(data.samples[:4000], data.samples[4000:], seed=2):.4f})")

csv_path = os.path.join(OUT, "samples.csv")
with open(csv_path, "w") as fh:
    fh.write("x,y,label\n")
    for row in samples:
        fh.write(f"{row[0]!r},{row[1]!r},-1\n")
print("wrote", csv_path)

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4.2), sharex=True, sharey=True)
    axes[0].scatter(data.samples[:4000, 0], data.samples[:4000, 1], s=2, alpha=0.4)
    axes[0].set_title("data")
    axes[1].scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.4, color="tab:orange")
    axes[1].set_title("multi-expert samples")
    fig.tight_layout()
    png = os.path.join(OUT, "gauss8_samples.png")
    fig.savefig(png, dpi=130)
    print("wrote", png)
except ImportError:
    print("matplotlib not installed; skipped the scatter plot")
