# Variant explorer for the directional-quality criterion (scratch; deleted
# before finishing). Caches pretrained checkpoints per seed under /tmp.
import os
import pickle
import sys

import numpy as np

from remixdiff import evalbench, remix, training
from remixdiff.denoiser import ModelConfig, plain_provider, precomputed_provider
from remixdiff.diffusion import SamplerConfig, build_schedule, sample

SEED = int(sys.argv[1])
VARIANT = sys.argv[2]  # e.g. anneal25, gamma005, base
STEPS, LR, K, N, T = 20000, 1e-3, 2, 4, 100
CACHE = "/tmp/c8cache"
os.makedirs(CACHE, exist_ok=True)

sched = build_schedule(T=T, beta_end=0.2)
data_train = evalbench.make_dataset("gauss8", 8000, seed=100)
data_eval = evalbench.make_dataset("gauss8", 16384, seed=200)
cfg = ModelConfig.mlp_default(data_dim=2)


def tc(seed, gamma0=0.0, anneal=0, lr=LR):
    return training.TrainConfig(
        total_steps=STEPS, batch_size=128, learning_rate=lr, seed=seed,
        gamma0=gamma0, anneal_steps=anneal, n_experts=N, n_basis=K,
    )


def evaluate(state, tag):
    bundle = training.bundle_from_state(state)
    loss = evalbench.mean_serving_loss(bundle, data_eval, t_per_interval=10,
                                       batch=512, seed=1, n_intervals=N)
    if bundle.kind == "plain":
        provider = plain_provider(cfg, bundle.model.plain_arrays())
    else:
        experts = remix.precompute_experts(bundle.model.bank, bundle.mixer, bundle.partition)
        provider = precomputed_provider(cfg, experts, bundle.partition)
    samples = sample(provider, sched, SamplerConfig(n_steps=T, seed=99), 16384, (2,))
    sw = evalbench.sliced_wasserstein(samples, data_eval.samples, n_proj=256, seed=5)
    print(f"seed {SEED} {tag:12s} loss={loss:.4f} sw={sw:.4f}", flush=True)
    return loss, sw


def pretrained_arrays(seed):
    path = f"{CACHE}/pre_{seed}.pkl"
    if os.path.exists(path):
        with open(path, "rb") as fh:
            return pickle.load(fh)
    state = training.init_train_state(tc(seed), cfg, sched, plain=True)
    training.train(state, data_train)
    arrays = state.model.plain_arrays()
    with open(path, "wb") as fh:
        pickle.dump(arrays, fh)
    evaluate(state, "pretrained")
    return arrays


pre = pretrained_arrays(SEED)

if VARIANT == "pre-eval":
    state = training.init_train_state(tc(SEED), cfg, sched, plain=True, init_from=pre)
    evaluate(state, "pretrained")
elif VARIANT == "continued":
    cont = training.init_train_state(tc(SEED + 1000), cfg, sched, plain=True, init_from=pre)
    training.train(cont, data_train)
    evaluate(cont, "continued")
else:
    gamma0, anneal = {
        "base": (0.1, STEPS // 2),
        "anneal25": (0.1, STEPS // 4),
        "gamma005": (0.05, STEPS // 2),
    }[VARIANT]
    rem = training.init_train_state(tc(SEED + 2000, gamma0=gamma0, anneal=anneal),
                                    cfg, sched, init_from=pre)
    training.train(rem, data_train)
    evaluate(rem, f"remix-{VARIANT}")
