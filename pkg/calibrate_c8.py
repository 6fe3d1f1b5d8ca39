# Scratch calibration for the Table-1-style desk-scale comparison (not part
# of the package; deleted before finishing).
import sys
import time

import numpy as np

from remixdiff import evalbench, remix, training
from remixdiff.denoiser import ModelConfig, plain_provider, precomputed_provider
from remixdiff.diffusion import SamplerConfig, build_schedule, sample

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
LR = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
BETA_END = float(sys.argv[3]) if len(sys.argv) > 3 else 0.02
FT_LR = float(sys.argv[4]) if len(sys.argv) > 4 else LR
SEEDS = [0, 1, 2]
K, N, T = 2, 4, 100

sched = build_schedule(T=T, beta_end=BETA_END)
data_train = evalbench.make_dataset("gauss8", 8000, seed=100)
data_eval = evalbench.make_dataset("gauss8", 4096, seed=200)


def tc(seed, gamma0=0.0, anneal=0, lr=None):
    return training.TrainConfig(
        total_steps=STEPS, batch_size=128, learning_rate=lr or LR, seed=seed,
        gamma0=gamma0, anneal_steps=anneal, n_experts=N, n_basis=K,
    )


def evaluate(state, tag, seed):
    bundle = training.bundle_from_state(state)
    loss = evalbench.mean_serving_loss(bundle, data_eval, t_per_interval=10,
                                       batch=512, seed=1, n_intervals=N)
    cfg = bundle.model_cfg
    if bundle.kind == "plain":
        provider = plain_provider(cfg, bundle.model.plain_arrays())
    else:
        experts = remix.precompute_experts(bundle.model.bank, bundle.mixer, bundle.partition)
        provider = precomputed_provider(cfg, experts, bundle.partition)
    samples = sample(provider, sched, SamplerConfig(n_steps=T, seed=99), 16384, (2,))
    sw = evalbench.sliced_wasserstein(samples, data_eval.samples, n_proj=256, seed=5)
    print(f"  seed {seed} {tag:10s} loss={loss:.4f} sw={sw:.4f}")
    return loss, sw


results = {}
for seed in SEEDS:
    t0 = time.perf_counter()
    cfg = ModelConfig.mlp_default(data_dim=2)

    pre = training.init_train_state(tc(seed), cfg, sched, plain=True)
    training.train(pre, data_train)
    res_pre = evaluate(pre, "pretrained", seed)

    cont = training.init_train_state(tc(seed + 1000, lr=FT_LR), cfg, sched, plain=True,
                                     init_from=pre.model.plain_arrays())
    training.train(cont, data_train)
    res_cont = evaluate(cont, "continued", seed)

    rem = training.init_train_state(
        tc(seed + 2000, gamma0=0.1, anneal=STEPS // 2, lr=FT_LR), cfg, sched,
        init_from=pre.model.plain_arrays(),
    )
    training.train(rem, data_train)
    res_rem = evaluate(rem, "remix", seed)

    results[seed] = (res_pre, res_cont, res_rem)
    both = res_rem[0] < min(res_pre[0], res_cont[0]) and res_rem[1] < min(res_pre[1], res_cont[1])
    print(f"  seed {seed}: remix wins both: {both}  ({time.perf_counter()-t0:.0f}s)")

wins = sum(
    1 for (p, c, r) in results.values()
    if r[0] < min(p[0], c[0]) and r[1] < min(p[1], c[1])
)
print(f"wins: {wins}/3 at steps={STEPS} lr={LR}")
