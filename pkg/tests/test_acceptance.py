"""Acceptance gate: every criterion runs at its stated tolerance and prints
one PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

The trained-model criteria share session fixtures; the full module trains
several desk-scale models from scratch and takes tens of minutes on a laptop
CPU. All runs are seeded.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from remixdiff import evalbench, remix, training
from remixdiff import numerics as nx
from remixdiff.denoiser import (
    MixedDenoiser,
    ModelConfig,
    plain_provider,
    precomputed_provider,
    runtime_mix_provider,
)
from remixdiff.diffusion import SamplerConfig, build_schedule, ddpm_step, sample
from remixdiff.numerics import Adam, Tensor

# Shared desk-scale recipe: T=100 with beta_end=0.2 so the chain actually
# reaches noise, Adam at 1e-3, prior annealed over the first half.
T = 100
BETA_END = 0.2
LR = 1e-3

# Criterion 8 (pinned by the gate): MLP-128x4, K=2, N=4, 20k steps.
C8_STEPS = 20000
C8_SEEDS = (0, 1, 2)

# Trained fixtures for the specialization/locality criteria.
C9_CONFIG = dict(n_experts=8, n_basis=4, total_steps=12000)
C10_CONFIG = dict(n_experts=20, n_basis=4, total_steps=10000)


@contextmanager
def criterion(num: int, description: str, budget_s: float | None = None):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[criterion {num:2d}] FAIL {description}")
        raise
    elapsed = time.perf_counter() - start
    if budget_s is not None:
        assert elapsed < budget_s, f"criterion {num} took {elapsed:.1f}s (budget {budget_s}s)"
    print(f"[criterion {num:2d}] PASS {description} ({elapsed:.1f}s)")


def train_run(seed, *, n_experts, n_basis, total_steps, plain=False, init_from=None,
              gamma0=0.1, anneal=None, data_seed=100):
    sched = build_schedule(T=T, beta_end=BETA_END)
    data = evalbench.make_dataset("gauss8", 8000, seed=data_seed)
    cfg = ModelConfig.mlp_default(data_dim=2)
    tc = training.TrainConfig(
        total_steps=total_steps, batch_size=128, learning_rate=LR, seed=seed,
        gamma0=gamma0, anneal_steps=total_steps // 2 if anneal is None else anneal,
        n_experts=n_experts, n_basis=n_basis,
    )
    state = training.init_train_state(tc, cfg, sched, plain=plain, init_from=init_from)
    metrics = training.train(state, data)
    return state, metrics


@pytest.fixture(scope="session")
def trained_k4n8():
    state, _ = train_run(7, **C9_CONFIG)
    return training.bundle_from_state(state)


@pytest.fixture(scope="session")
def trained_n20():
    state, _ = train_run(8, **C10_CONFIG)
    return training.bundle_from_state(state)


# -- 1. mixing equivalence -----------------------------------------------------------


def test_criterion_01_mixing_equivalence():
    with criterion(1, "mixed forward equals materialize-then-forward on 100 "
                      "random layer configs (1e-6 @ 64-bit, 1e-4 @ 32-bit)", 10):
        rng = np.random.default_rng(101)
        for trial in range(100):
            K = int(rng.integers(1, 7))
            din = int(rng.integers(1, 17))
            dout = int(rng.integers(1, 17))
            bsz = int(rng.integers(1, 9))
            dtype = np.float64 if trial % 2 == 0 else np.float32
            tol = 1e-6 if dtype == np.float64 else 1e-4
            x = Tensor(rng.standard_normal((bsz, din)).astype(dtype))
            w = Tensor(rng.standard_normal((K, din, dout)).astype(dtype))
            b = Tensor(rng.standard_normal((K, dout)).astype(dtype))
            alpha = rng.standard_normal(K).astype(dtype)
            out = remix.mixed_linear_forward(x, w, b, Tensor(alpha))
            # Reference: brute-force float64 materialization + plain linear.
            a64 = alpha.astype(np.float64)
            w_ref = np.einsum("k,kio->io", a64, w.data.astype(np.float64))
            b_ref = a64 @ b.data.astype(np.float64)
            ref = x.data.astype(np.float64) @ w_ref + b_ref
            denom = max(np.abs(ref).max(), 1e-9)
            rel = np.abs(out.data - ref).max() / denom
            assert rel <= tol, f"trial {trial}: rel err {rel} at {dtype}"


# -- 2. one-hot isolation ------------------------------------------------------------


def test_criterion_02_onehot_isolation():
    with criterion(2, "onehot mixer: non-selected basis gradient blocks exactly "
                      "zero over 50 random training steps", 30):
        sched = build_schedule(T=T, beta_end=BETA_END)
        data = evalbench.make_dataset("gauss8", 2048, seed=0)
        cfg = ModelConfig(arch="mlp", data_dim=2, width=32, depth=3, time_embed_dim=16)
        tc = training.TrainConfig(
            total_steps=50, batch_size=32, learning_rate=LR, seed=5,
            gamma0=0.0, anneal_steps=0, mixer_kind="onehot", n_experts=8, n_basis=4,
        )
        state = training.init_train_state(tc, cfg, sched)
        rng = np.random.default_rng(6)
        for _ in range(50):
            idx = rng.integers(2048, size=32)
            row = training.train_step(state, (data.samples[idx], None))
            selected = remix.onehot_basis_index(row["expert"], 8, 4)
            for name, widened in state.model.bank.layers.items():
                g = widened.grad
                assert g is not None
                for k in range(4):
                    if k != selected:
                        assert not np.any(g[k] != 0.0), \
                            f"basis {k} of '{name}' leaked gradient (expert {row['expert']})"


# -- 3. coefficient gradient ----------------------------------------------------------


def test_criterion_03_coefficient_gradient_fd():
    with criterion(3, "d(loss+prior)/d(logits) matches central differences "
                      "(MLP 32x2, K=3, N=5, batch 8, rel err <= 1e-3)", 60):
        rng = np.random.default_rng(103)
        cfg = ModelConfig(arch="mlp", data_dim=2, width=32, depth=2, time_embed_dim=16)
        K, N = 3, 5
        sched = build_schedule(T=T, beta_end=BETA_END)
        partition = remix.IntervalPartition(T=T, N=N)
        model = MixedDenoiser.build(cfg, K, rng, dtype=np.float64)
        mixer = remix.create_mixer("softmax", "global", N, K, rng, dtype=np.float64)
        prior = training.prior_coefficients(N, K)
        gamma = 0.2
        i = 1
        lo, hi = remix.interval_bounds(partition, i)
        x0 = rng.standard_normal((8, 2))
        t = rng.integers(lo, hi, size=8)
        eps = rng.standard_normal((8, 2))

        def loss_fn(_):
            alpha = remix.coefficients(mixer, i)
            loss = training.expert_loss(model, alpha, x0, t, eps, sched,
                                        partition=partition, expert=i)
            reg = training.prior_regularizer(remix.coefficient_rows(mixer), prior, gamma)
            return loss + reg

        report = nx.check_gradients(loss_fn, {"pi": mixer.logits}, h=1e-4, tol=1e-3)
        for name, err, ok in report:
            assert ok, f"{name}: rel err {err}"


# -- 4. prior convergence ---------------------------------------------------------------


def test_criterion_04_prior_convergence():
    with criterion(4, "regularizer-only optimization reaches the prior argmax "
                      "for every row within 500 steps, R monotone under 20-step MA", 30):
        rng = np.random.default_rng(104)
        N, K = 20, 4
        gamma = 1.0
        prior = training.prior_coefficients(N, K)
        mixer = remix.create_mixer("softmax", "global", N, K, rng, dtype=np.float64)
        opt = Adam(mixer.trainable(), lr=0.05, lazy_rows=set(mixer.trainable()))
        r_series = []
        matched_at = None
        for step in range(500):
            opt.zero_grad()
            reg = training.prior_regularizer(remix.coefficient_rows(mixer), prior, gamma)
            reg.backward()
            r_series.append(reg.item())
            opt.step()
            hot = remix.coefficient_matrix(mixer).argmax(axis=1)
            if matched_at is None and np.array_equal(hot, prior.argmax(axis=1)):
                matched_at = step
        assert matched_at is not None and matched_at < 500, "argmax never aligned"
        hot = remix.coefficient_matrix(mixer).argmax(axis=1)
        assert np.array_equal(hot, prior.argmax(axis=1)), "alignment regressed"
        ma = np.convolve(np.array(r_series), np.ones(20) / 20, mode="valid")
        assert (np.diff(ma) <= 0).all(), "20-step moving average of R not monotone"


# -- 5. anneal contract -------------------------------------------------------------------


def test_criterion_05_anneal_contract():
    with criterion(5, "gamma(0)=gamma0, gamma(anneal)=0, linear in between, "
                      "exact to floating point"):
        for gamma0 in (0.1, 0.37, 2.0):
            for anneal in (1, 100, 12345):
                assert training.gamma_schedule(0, anneal, gamma0) == gamma0
                assert training.gamma_schedule(anneal, anneal, gamma0) == 0.0
                for step in range(0, anneal + anneal // 3 + 2, max(1, anneal // 17)):
                    expected = gamma0 * max(0.0, 1.0 - step / anneal)
                    assert training.gamma_schedule(step, anneal, gamma0) == expected


# -- 6. precompute / runtime equivalence ----------------------------------------------------


def test_criterion_06_precompute_runtime_equivalence(trained_k4n8):
    with criterion(6, "full 100-step trajectories of precomputed vs runtime-mix "
                      "sampling identical within 1e-5 (shared seed)", 120):
        bundle = trained_k4n8
        cfg = SamplerConfig(n_steps=T, stochastic=True, seed=1234)

        def run(mode):
            if mode == "precomputed":
                experts = remix.precompute_experts(bundle.model.bank, bundle.mixer,
                                                   bundle.partition)
                base = precomputed_provider(bundle.model_cfg, experts, bundle.partition)
            else:
                base = runtime_mix_provider(bundle.model, bundle.mixer, bundle.partition)
            trajectory = []

            def recording(x, t, labels):
                trajectory.append((t, x.copy()))
                return base(x, t, labels)

            final = sample(recording, bundle.sched, cfg, 64, (2,))
            return trajectory, final

        traj_pre, final_pre = run("precomputed")
        traj_mix, final_mix = run("runtime-mix")
        assert len(traj_pre) == len(traj_mix) == T
        for (t_a, x_a), (t_b, x_b) in zip(traj_pre, traj_mix):
            assert t_a == t_b
            assert np.abs(x_a - x_b).max() <= 1e-5
        assert np.abs(final_pre - final_mix).max() <= 1e-5


# -- 7. diffusion oracle ----------------------------------------------------------------------


def test_criterion_07_gaussian_reverse_oracle():
    with criterion(7, "reverse chain with the closed-form optimal predictor on "
                      "unit Gaussian data: mean within 0.1, cov diag within 0.1", 120):
        sched = build_schedule(T=T, beta_end=BETA_END)
        rng = np.random.default_rng(107)
        n, d = 4096, 2
        x = rng.standard_normal((n, d))
        for t in range(sched.T - 1, -1, -1):
            eps_hat = np.sqrt(1.0 - sched.alpha_bar[t]) * x
            x = ddpm_step(x, eps_hat, t, sched, rng=rng, stochastic=True)
        mean = x.mean(axis=0)
        cov = np.cov(x.T)
        assert np.abs(mean).max() < 0.1, f"mean off: {mean}"
        assert np.abs(np.diag(cov) - 1.0).max() < 0.1, f"cov diag off: {np.diag(cov)}"


# -- 8. directional quality reproduction -------------------------------------------------------


def _evaluate_arm(state, data_eval, n_intervals):
    bundle = training.bundle_from_state(state)
    loss = evalbench.mean_serving_loss(bundle, data_eval, t_per_interval=10,
                                       batch=512, seed=1, n_intervals=n_intervals)
    if bundle.kind == "plain":
        provider = plain_provider(bundle.model_cfg, bundle.model.plain_arrays())
    else:
        experts = remix.precompute_experts(bundle.model.bank, bundle.mixer,
                                           bundle.partition)
        provider = precomputed_provider(bundle.model_cfg, experts, bundle.partition)
    samples = sample(provider, bundle.sched, SamplerConfig(n_steps=T, seed=99),
                     16384, (2,))
    sw = evalbench.sliced_wasserstein(samples, data_eval.samples, n_proj=256, seed=5)
    return loss, sw


def test_criterion_08_directional_quality():
    with criterion(8, "remix (K=2, N=4, MLP-128x4, T=100, 20k steps) beats the "
                      "pretrained model and continued training on per-interval "
                      "loss and sliced Wasserstein in >= 2 of 3 seeds", 45 * 60):
        data_eval = evalbench.make_dataset("gauss8", 16384, seed=200)
        wins = 0
        for seed in C8_SEEDS:
            pre, _ = train_run(seed, n_experts=4, n_basis=2, total_steps=C8_STEPS,
                               plain=True, gamma0=0.0, anneal=0)
            pre_arrays = pre.model.plain_arrays()
            cont, _ = train_run(seed + 1000, n_experts=4, n_basis=2,
                                total_steps=C8_STEPS, plain=True,
                                init_from=pre_arrays, gamma0=0.0, anneal=0)
            rem, _ = train_run(seed + 2000, n_experts=4, n_basis=2,
                               total_steps=C8_STEPS, init_from=pre_arrays)
            loss_p, sw_p = _evaluate_arm(pre, data_eval, 4)
            loss_c, sw_c = _evaluate_arm(cont, data_eval, 4)
            loss_r, sw_r = _evaluate_arm(rem, data_eval, 4)
            win = loss_r < min(loss_p, loss_c) and sw_r < min(sw_p, sw_c)
            wins += win
            print(f"  seed {seed}: loss pre/cont/remix = "
                  f"{loss_p:.4f}/{loss_c:.4f}/{loss_r:.4f}  "
                  f"sw = {sw_p:.4f}/{sw_c:.4f}/{sw_r:.4f}  -> "
                  f"{'WIN' if win else 'no win'}")
        assert wins >= 2, f"remix won only {wins}/3 seeds"


# -- 9. specialization -------------------------------------------------------------------------


def test_criterion_09_specialization_grid(trained_k4n8):
    with criterion(9, "trained K=4, N=8 run: diagonal entry best against all "
                      "experts >= 2 intervals away in at least 6 of 8 columns"):
        data = evalbench.make_dataset("gauss8", 4096, seed=300)
        grid = evalbench.loss_by_timestep(trained_k4n8, data, t_per_interval=8,
                                          batch=512, seed=2)
        matrix = grid.matrix
        good_columns = 0
        for i in range(8):
            ok = all(matrix[i, i] <= matrix[j, i]
                     for j in range(8) if abs(i - j) >= 2)
            good_columns += ok
        print(f"  specialized columns: {good_columns}/8")
        assert good_columns >= 6
        # Aggregate specialization statistic: diagonal below far off-diagonal.
        assert grid.diagonal_mean() < grid.offdiagonal_mean()


# -- 10. coefficient locality --------------------------------------------------------------------


def test_criterion_10_coefficient_locality(trained_n20):
    with criterion(10, "trained N=20 run: adjacent coefficient rows more similar "
                       "than rows N/2 apart (mean cosine)"):
        coeffs = remix.coefficient_matrix(trained_n20.mixer)
        adjacent, distant = evalbench.adjacent_vs_distant_cosine(coeffs)
        print(f"  adjacent cosine {adjacent:.4f} vs distant {distant:.4f}")
        assert adjacent > distant


# -- 11. latency direction ----------------------------------------------------------------------


def _dit_bundle(K):
    cfg = ModelConfig.dit_tiny_default()
    tc = training.TrainConfig(total_steps=1, batch_size=4, seed=0, anneal_steps=1,
                              n_experts=8, n_basis=K)
    state = training.init_train_state(tc, cfg, build_schedule(T=T, beta_end=BETA_END))
    return training.bundle_from_state(state)


def test_criterion_11_latency_direction():
    with criterion(11, "dit-tiny: precomputed per-step latency <= runtime mixing "
                       "at K=4; modes within 5% at K=1"):
        bundle4 = _dit_bundle(4)
        runtime4 = evalbench.bench_latency(bundle4, "runtime-mix", batch=32, reps=100)
        precomp4 = evalbench.bench_latency(bundle4, "precomputed", batch=32, reps=100)
        print(f"  K=4: runtime-mix {runtime4.mean_ms:.3f} ms vs "
              f"precomputed {precomp4.mean_ms:.3f} ms")
        assert precomp4.mean_ms <= runtime4.mean_ms
        assert np.abs(runtime4.outputs - precomp4.outputs).max() <= 1e-5

        bundle1 = _dit_bundle(1)
        runtime1 = evalbench.bench_latency(bundle1, "runtime-mix", batch=32, reps=100)
        precomp1 = evalbench.bench_latency(bundle1, "precomputed", batch=32, reps=100)
        gap = abs(runtime1.mean_ms - precomp1.mean_ms) / min(runtime1.mean_ms,
                                                             precomp1.mean_ms)
        print(f"  K=1: runtime-mix {runtime1.mean_ms:.3f} ms vs "
              f"precomputed {precomp1.mean_ms:.3f} ms (gap {100 * gap:.1f}%)")
        assert gap <= 0.05


# -- 12. K=1 degeneracy -------------------------------------------------------------------------


def test_criterion_12_k1_degeneracy():
    with criterion(12, "K=1 remix reproduces the plain training loss trajectory "
                       "bit-identically (1000 steps, shared seed)"):
        mixed, m_mixed = train_run(12, n_experts=4, n_basis=1, total_steps=1000)
        plain, m_plain = train_run(12, n_experts=4, n_basis=1, total_steps=1000,
                                   plain=True)
        for a, b in zip(m_mixed, m_plain):
            assert a["expert"] == b["expert"]
            assert a["loss"] == b["loss"], \
                f"step {a['step']}: {a['loss']!r} != {b['loss']!r}"
        for name, widened in mixed.model.bank.layers.items():
            assert widened.data[0].tobytes() == plain.model.params[name].data.tobytes()
