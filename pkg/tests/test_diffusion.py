import numpy as np
import pytest

from remixdiff.diffusion import (
    SamplerConfig,
    build_schedule,
    ddpm_step,
    forward_diffuse,
    guided_eps,
    respaced_schedule,
    sample,
    strided_timesteps,
)


# -- schedule ---------------------------------------------------------------------


def test_schedule_product_oracle_T4():
    # Explicit product oracle for betas [0.1, 0.2, 0.3, 0.4].
    sched = build_schedule("linear", T=4, beta_start=0.1, beta_end=0.4)
    assert np.allclose(sched.beta, [0.1, 0.2, 0.3, 0.4])
    expected = []
    prod = 1.0
    for b in [0.1, 0.2, 0.3, 0.4]:
        prod *= 1.0 - b
        expected.append(prod)
    assert np.allclose(sched.alpha_bar, [0.9, 0.72, 0.504, 0.3024], rtol=1e-12)
    assert np.allclose(sched.alpha_bar, expected, rtol=1e-12)


def test_schedule_single_step():
    sched = build_schedule("linear", T=1, beta_start=0.3, beta_end=0.3)
    assert np.allclose(sched.alpha_bar, [0.7])


def test_schedule_classical_defaults_fully_noised():
    sched = build_schedule("linear", T=1000, beta_start=1e-4, beta_end=0.02)
    # Independent product oracle.
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    assert abs(sched.alpha_bar[-1] - prod) < 1e-15
    assert sched.alpha_bar[-1] < 0.01


def test_schedule_monotone_and_bounded():
    sched = build_schedule(T=100)
    assert (np.diff(sched.alpha_bar) < 0).all()
    assert ((sched.beta > 0) & (sched.beta < 1)).all()


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        build_schedule(T=10, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        build_schedule(T=10, beta_start=0.0, beta_end=0.1)
    with pytest.raises(ValueError):
        build_schedule(T=0)


# -- forward diffusion --------------------------------------------------------------


def test_forward_diffuse_hand_case():
    # abar = 0.25 gives x_t = 0.5*x0 + sqrt(0.75)*eps.
    sched = build_schedule(T=1, beta_start=0.75, beta_end=0.75)
    x0 = np.array([[1.0, 0.0]])
    eps = np.array([[0.0, 1.0]])
    x_t = forward_diffuse(x0, 0, eps, sched)
    assert np.allclose(x_t, [[0.5, np.sqrt(0.75)]], rtol=1e-7)


def test_forward_diffuse_limits():
    sched = build_schedule(T=2, beta_start=1e-8, beta_end=1e-8)
    x0 = np.random.default_rng(0).standard_normal((4, 2))
    eps = np.random.default_rng(1).standard_normal((4, 2))
    # abar ~ 1: x_t ~ x0.
    assert np.allclose(forward_diffuse(x0, 0, eps, sched), x0, atol=1e-3)
    # abar ~ 0: x_t ~ eps.
    tight = build_schedule(T=1, beta_start=1 - 1e-9, beta_end=1 - 1e-9)
    assert np.allclose(forward_diffuse(x0, 0, eps, tight), eps, atol=1e-4)


def test_forward_diffuse_shape_and_range_errors():
    sched = build_schedule(T=10)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 2)), 0, np.zeros((3, 2)), sched)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 2)), 10, np.zeros((2, 2)), sched)


# -- reverse step --------------------------------------------------------------------


def test_single_step_inversion_recovers_x0():
    # Deterministic reverse with the true eps inverts the forward map.
    sched = build_schedule(T=1, beta_start=0.3, beta_end=0.3)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((8, 2))
    eps = rng.standard_normal((8, 2))
    x_t = forward_diffuse(x0, 0, eps, sched)
    rec = ddpm_step(x_t, eps, 0, sched, stochastic=False)
    assert np.allclose(rec, x0, rtol=1e-5, atol=1e-7)


def test_single_step_inversion_any_t():
    sched = build_schedule(T=50)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 3))
    for t in (0, 7, 49):
        eps = rng.standard_normal((4, 3))
        x_t = forward_diffuse(x0, t, eps, sched)
        # One deterministic step with the exact eps returns the posterior mean;
        # only at t with abar_{t-1}=1 (t=0) does it equal x0 exactly.
        rec = ddpm_step(x_t, eps, t, sched, stochastic=False)
        assert np.isfinite(rec).all()
    x_t = forward_diffuse(x0, 0, eps, sched)
    rec = ddpm_step(x_t, eps, 0, sched, stochastic=False)
    assert np.allclose(rec, x0, rtol=1e-5)


def test_t0_never_adds_noise():
    sched = build_schedule(T=10)
    x = np.ones((2, 2))
    eps = np.zeros((2, 2))
    out1 = ddpm_step(x, eps, 0, sched, rng=np.random.default_rng(0), stochastic=True)
    out2 = ddpm_step(x, eps, 0, sched, stochastic=False)
    assert np.array_equal(out1, out2)


def test_reverse_chain_with_optimal_predictor_recovers_unit_gaussian():
    # For x0 ~ N(0, I) the posterior-optimal predictor is eps(x, t) =
    # sqrt(1 - abar_t) * x (closed-form Gaussian diffusion oracle).
    sched = build_schedule(T=100)
    rng = np.random.default_rng(4)
    n, d = 4096, 2
    x = rng.standard_normal((n, d))
    for t in range(sched.T - 1, -1, -1):
        eps_hat = np.sqrt(1.0 - sched.alpha_bar[t]) * x
        x = ddpm_step(x, eps_hat, t, sched, rng=rng, stochastic=True)
    mean = x.mean(axis=0)
    cov = np.cov(x.T)
    assert np.abs(mean).max() < 0.1
    assert np.abs(np.diag(cov) - 1.0).max() < 0.1


# -- guidance ---------------------------------------------------------------------------


def test_guided_eps_examples():
    e_u = np.array([0.0])
    e_c = np.array([2.0])
    assert np.allclose(guided_eps(e_c, e_u, 0.0), e_u)
    assert np.allclose(guided_eps(e_c, e_u, 1.0), e_c)
    assert np.allclose(guided_eps(e_c, e_u, 1.5), [3.0])
    with pytest.raises(ValueError):
        guided_eps(np.zeros(2), np.zeros(3), 1.0)


# -- strided / respaced sampling ----------------------------------------------------------


def test_strided_timesteps_cover_endpoints():
    ts = strided_timesteps(100, 10)
    assert ts[0] == 0 and ts[-1] == 99
    assert (np.diff(ts) > 0).all()
    assert np.array_equal(strided_timesteps(100, 100), np.arange(100))


def test_respaced_schedule_matches_marginals():
    sched = build_schedule(T=100)
    ts = strided_timesteps(100, 10)
    sub = respaced_schedule(sched, ts)
    assert np.allclose(sub.alpha_bar, sched.alpha_bar[ts], rtol=1e-12)


# -- sampler --------------------------------------------------------------------------------


def _zero_provider(x, t, labels):
    return np.zeros_like(x)


def test_sample_reproducible_and_shaped():
    sched = build_schedule(T=20)
    cfg = SamplerConfig(n_steps=20, stochastic=True, seed=11)
    a = sample(_zero_provider, sched, cfg, 16, (2,))
    b = sample(_zero_provider, sched, cfg, 16, (2,))
    assert a.shape == (16, 2)
    assert a.tobytes() == b.tobytes()


def test_sample_n_zero_gives_empty_batch():
    sched = build_schedule(T=20)
    out = sample(_zero_provider, sched, SamplerConfig(n_steps=20), 0, (2,))
    assert out.shape == (0, 2)


def test_sample_rejects_bad_steps():
    sched = build_schedule(T=20)
    with pytest.raises(ValueError):
        sample(_zero_provider, sched, SamplerConfig(n_steps=21), 4, (2,))


def test_sample_guidance_queries_both_paths():
    sched = build_schedule(T=10)
    calls = []

    def provider(x, t, labels):
        calls.append(labels is None)
        return np.zeros_like(x)

    cfg = SamplerConfig(n_steps=10, guidance_scale=1.5, stochastic=False, seed=0)
    sample(provider, sched, cfg, 2, (2,), class_label=3)
    # Each of the 10 steps queries conditional then unconditional.
    assert len(calls) == 20
    assert calls[::2] == [False] * 10 and calls[1::2] == [True] * 10
