import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperguide import autodiff as ad
from hyperguide.autodiff import Tensor
from hyperguide.diffusion import (HyperLDM, LDMConfig, cfg_mix, classifier_guidance_mix,
                                  classifier_guided_eps, clip_log_likelihood_grad, ddpm_step,
                                  draw_training_batch, guided_eps, init_noise_net, ldm_loss, ldm_train,
                                  ldm_train_step, make_schedule, noise_net, q_sample, q_step, reverse_process,
                                  sample_classifier_guided, sample_latent, time_embed)
from hyperguide.hyperclip import CLIPConfig, hyperclip_encode, init_clip
from hyperguide.hypernet import HyperConfig, hnet_forward, init_hnet
from oracles import rel_err

TINY = LDMConfig(T=20, hidden=(16, 24), d_t=8, steps=0)


def product_loop(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - float(b)
        out.append(acc)
    return np.array(out)


@pytest.fixture(scope="module")
def two_mode_model():
    """Conditional model on 2-D latents: descriptor (1, 0) -> mean (+2, +2), (0, 1) -> (-2, -2)."""
    rng = np.random.default_rng(0)
    n = 400
    which = rng.integers(0, 2, n)
    E = np.eye(2)[which]
    Z = np.where(which[:, None] == 0, 2.0, -2.0) + 0.3 * rng.standard_normal((n, 2))
    cfg = LDMConfig(T=30, hidden=(32, 32), d_t=16, steps=600, p_drop=0.2, standardize=False)
    return ldm_train(Z, E, cfg, seed=0)


# schedule


def test_paper_schedule_spacing():
    s = make_schedule(350, 1e-4, 0.06)
    assert s.betas[1] - s.betas[0] == pytest.approx((0.06 - 0.0001) / 349, abs=1e-15)
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.06, abs=1e-15)


def test_alphas_exact_and_product_oracle():
    for T in (100, 350):
        s = make_schedule(T, 1e-4, 0.06)
        assert np.array_equal(s.alphas, 1.0 - s.betas)
        assert np.max(np.abs(s.alpha_bars - product_loop(s.betas))) <= 1e-12
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.betas > 0) & (s.betas < 1))


def test_sigma_modes():
    beta, tilde = make_schedule(50, sigma_mode="beta"), make_schedule(50, sigma_mode="tilde")
    assert np.allclose(beta.sigmas ** 2, beta.betas)
    ab = tilde.alpha_bars
    assert tilde.sigmas[0] == 0.0
    for t in range(1, 50):
        expect = tilde.betas[t] * (1 - ab[t - 1]) / (1 - ab[t])
        assert tilde.sigmas[t] ** 2 == pytest.approx(expect, rel=1e-12)
    assert np.all(tilde.sigmas <= beta.sigmas)


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(1)
    with pytest.raises(ValueError):
        make_schedule(10, 0.1, 0.01)
    with pytest.raises(ValueError):
        make_schedule(10, sigma_mode="other")
    with pytest.raises(ValueError):
        make_schedule(10).at("betas", 0)


# forward process


def test_q_sample_small_noise_limit():
    s = make_schedule(100)
    z0, eps = np.array([1.0, -2.0, 0.5]), np.array([0.3, -1.2, 2.0])
    assert np.linalg.norm(q_sample(z0, 1, eps, s) - z0) <= math.sqrt(1e-4) * np.linalg.norm(eps) + 1e-12


def test_q_sample_zero_noise():
    s = make_schedule(100)
    z0 = np.array([1.0, -2.0])
    assert np.array_equal(q_sample(z0, 40, np.zeros(2), s), math.sqrt(s.alpha_bars[39]) * z0)
    with pytest.raises(ValueError):
        q_sample(z0, 101, np.zeros(2), s)


def test_q_sample_per_row_timesteps():
    s = make_schedule(100)
    z0, eps = np.ones((3, 2)), np.zeros((3, 2))
    out = q_sample(z0, np.array([1, 50, 100]), eps, s)
    assert np.allclose(out[:, 0], np.sqrt(s.alpha_bars[[0, 49, 99]]))


def test_q_sample_monte_carlo_moments():
    s = make_schedule(350, 1e-4, 0.06)
    z0, t = np.array([1.5, -0.5]), 120
    eps = np.random.default_rng(1).standard_normal((10_000, 2))
    z = q_sample(z0, t, eps, s)
    ab = s.alpha_bars[t - 1]
    se_mean = math.sqrt((1 - ab) / 10_000)
    assert np.all(np.abs(z.mean(0) - math.sqrt(ab) * z0) < 3 * se_mean)
    se_var = (1 - ab) * math.sqrt(2 / 9_999)
    assert np.all(np.abs(z.var(0, ddof=1) - (1 - ab)) < 3 * se_var)


def test_composed_single_steps_match_marginal():
    s = make_schedule(60)
    rng = np.random.default_rng(2)
    z = np.tile([1.0, -1.0], (10_000, 1))
    for t in range(1, 31):
        z = q_step(z, t, rng.standard_normal(z.shape), s)
    ab = s.alpha_bars[29]
    se_mean = math.sqrt((1 - ab) / 10_000)
    assert np.all(np.abs(z.mean(0) - math.sqrt(ab) * np.array([1.0, -1.0])) < 3 * se_mean)
    assert np.all(np.abs(z.var(0, ddof=1) - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2 / 9_999))


# time embedding


def test_time_embed_zero():
    e = time_embed(0, 150)
    assert np.array_equal(e[0::2], np.zeros(75)) and np.array_equal(e[1::2], np.ones(75))


def test_time_embed_distinct_and_odd_rejected():
    embs = time_embed(np.arange(1, 351), 150)
    d2 = ((embs[:, None, :] - embs[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    assert math.sqrt(d2.min()) > 1e-6
    with pytest.raises(ValueError):
        time_embed(3, 151)


def test_time_embed_formula():
    e = time_embed(7, 8)
    for i in range(4):
        w = 10000 ** (-2 * i / 8)
        assert e[2 * i] == pytest.approx(math.sin(7 * w), abs=1e-15)
        assert e[2 * i + 1] == pytest.approx(math.cos(7 * w), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([2, 16, 150]))
def test_time_embed_bounded(t, d):
    e = time_embed(t, d)
    assert np.all(np.abs(e) <= 1.0) and np.array_equal(e, time_embed(t, d))


# noise network


def test_noise_net_zero_output_layer_and_determinism():
    p = init_noise_net(3, 2, TINY, 0)
    z = np.random.default_rng(0).standard_normal((4, 3))
    e = np.random.default_rng(1).standard_normal((4, 2))
    assert np.array_equal(noise_net(z, 5, e, p).data, np.zeros((4, 3)))
    p["out.w"] = np.random.default_rng(2).standard_normal(p["out.w"].shape)
    a, b = noise_net(z, 5, e, p).data, noise_net(z, 5, e, p).data
    assert np.array_equal(a, b) and a.shape == (4, 3)


def test_noise_net_dimension_mismatch():
    p = init_noise_net(3, 2, TINY, 0)
    with pytest.raises(ValueError):
        noise_net(np.zeros((1, 4)), 1, np.zeros((1, 2)), p)


def test_noise_net_param_grad_spot_check():
    p = init_noise_net(2, 2, TINY, 1)
    rng = np.random.default_rng(3)
    p = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}
    z, e = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))

    def f(q):
        out = noise_net(z, np.array([1, 7, 20]), e, q)
        return ad.tsum(out * out)

    _, grads = ad.value_and_grad(f, p)
    for k in ("in.w", "b0.w1", "b1.s2", "b1.proj", "out.w", "out.b"):
        idx = tuple(rng.integers(s) for s in p[k].shape)

        def fk(v, k=k, idx=idx):
            q = dict(p)
            arr = q[k].copy()
            arr[idx] = v[0]
            q[k] = arr
            return float(f(q).data)

        fd = ad.finite_diff(fk, np.array([p[k][idx]]))[0]
        assert rel_err(grads[k][idx], fd, floor=1e-6) < 1e-4


def test_noise_net_gate_reduction():
    p = init_noise_net(3, 2, LDMConfig(hidden=(16,), d_t=8), 0)
    assert p["b0.s1"].shape == (16, 4) and p["b0.s2"].shape == (4, 16)
    assert p["b0.w1"].shape == (16 + 8 + 2, 16)


# training


def test_init_loss_equals_latent_dim():
    s = make_schedule(50)
    p = init_noise_net(4, 2, LDMConfig(T=50, hidden=(16,), d_t=8), 0)
    rng = np.random.default_rng(0)
    n = 20_000
    eps = rng.standard_normal((n, 4))
    t = rng.integers(1, 51, n)
    loss = float(ldm_loss(p, rng.standard_normal((n, 4)), np.zeros((n, 2)), t, eps, s).data)
    assert abs(loss - 4) < 3 * math.sqrt(2 * 4 / n)


def test_oracle_network_has_zero_loss():
    s = make_schedule(10)
    eps = np.random.default_rng(0).standard_normal((5, 3))
    zt = q_sample(np.ones((5, 3)), 4, eps, s)
    assert np.sum((eps - (zt - math.sqrt(s.alpha_bars[3])) / math.sqrt(1 - s.alpha_bars[3])) ** 2) < 1e-20


def test_full_dropout_zeroes_every_descriptor():
    cfg = LDMConfig(p_drop=1.0, batch_size=200)
    _, _, _, keep = draw_training_batch(10, cfg, 2, np.random.default_rng(0))
    assert not keep.any()
    half = LDMConfig(p_drop=0.5, batch_size=4000)
    _, t, _, keep = draw_training_batch(10, half, 2, np.random.default_rng(0))
    assert abs(keep.mean() - 0.5) < 0.03 and t.min() >= 1 and t.max() <= half.T


def test_train_step_masks_descriptors():
    cfg = TINY
    s = cfg.schedule()
    p = init_noise_net(2, 2, cfg, 0)
    rng = np.random.default_rng(0)
    z0, e, eps, t = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), np.array([1, 5, 9, 20])
    a, _, la = ldm_train_step(p, ad.AdamState(), z0, e, t, eps, np.zeros(4, bool), s, 1e-3, 1.0)
    b, _, lb = ldm_train_step(p, ad.AdamState(), z0, np.zeros_like(e), t, eps, np.ones(4, bool), s, 1e-3, 1.0)
    assert la == lb and all(np.array_equal(a[k], b[k]) for k in a)
    with pytest.raises(ValueError):
        ldm_train_step(p, ad.AdamState(), z0[:0], e[:0], t[:0], eps[:0], np.ones(0, bool), s, 1e-3, 1.0)


def test_training_loss_decreases(two_mode_model):
    h = two_mode_model.history
    assert h[:20].mean() > h[-100:].mean()
    assert np.all(np.isfinite(h))


def test_standardization_round_trip():
    Z = np.random.default_rng(0).normal(5, 3, (50, 3))
    m = ldm_train(Z, np.zeros((50, 1)), LDMConfig(steps=0), 0)
    S = m.from_latent(Z)
    assert np.allclose(S.mean(0), 0, atol=1e-12) and np.allclose(S.std(0), 1, atol=1e-6)
    assert np.allclose(m.to_latent(S), Z)


def test_training_validation():
    with pytest.raises(ValueError):
        ldm_train(np.zeros((0, 2)), np.zeros((0, 2)), TINY)
    with pytest.raises(ValueError):
        LDMConfig(p_drop=1.5)
    with pytest.raises(ValueError):
        LDMConfig(d_t=7)


# classifier-free guidance


def test_cfg_mix_examples():
    u, c = np.array([0.0, 2.0]), np.array([2.0, 0.0])
    assert np.array_equal(cfg_mix(u, c, 0.0), u)
    assert np.array_equal(cfg_mix(u, c, 1.0), c)
    assert np.array_equal(cfg_mix(u, c, 1.5), np.array([3.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.floats(0, 5))
def test_cfg_mix_agreement_identity(a, gamma):
    a = np.array(a)
    assert np.allclose(cfg_mix(a, a, gamma), a, rtol=1e-12, atol=1e-12)


def test_ddpm_step_examples():
    s = make_schedule(20)
    z = np.array([0.7, -1.3])
    t = 9
    assert np.array_equal(ddpm_step(z, t, np.zeros(2), np.zeros(2), s), z / math.sqrt(s.alphas[t - 1]))
    with pytest.raises(ValueError):
        ddpm_step(z, 0, z, z, s)


def test_ddpm_step_hand_arithmetic():
    s = make_schedule(5)
    # overwrite one step with the worked numbers: beta 0.04, alpha_bar 0.36
    betas, ab = s.betas.copy(), s.alpha_bars.copy()
    betas[2], ab[2] = 0.04, 0.36
    hand = type(s)(s.T, betas, 1 - betas, ab, np.sqrt(betas), "beta")
    got = ddpm_step(np.array([1.0]), 3, np.array([0.5]), np.array([0.0]), hand)[0]
    assert got == pytest.approx((1 - 0.04 / 0.8 * 0.5) / math.sqrt(0.96), abs=1e-12)
    assert got == pytest.approx(0.99511, abs=1e-5)


def test_ddpm_noise_std_and_final_step():
    s = make_schedule(20)
    xi = np.random.default_rng(0).standard_normal((10_000, 1))
    out = ddpm_step(np.zeros((10_000, 1)), 12, np.zeros((10_000, 1)), xi, s)
    target = math.sqrt(s.betas[11])
    assert abs(out.std(ddof=1) / target - 1) < 3 * math.sqrt(1 / (2 * 9_999))
    assert np.array_equal(ddpm_step(np.ones(1), 1, np.zeros(1), np.array([5.0]), s), 1 / np.sqrt(s.alphas[:1]))


def test_gamma_zero_ignores_descriptor(two_mode_model):
    a = sample_latent(two_mode_model, np.array([[1.0, 0.0]]), 0.0, seed=4)
    b = sample_latent(two_mode_model, np.array([[0.0, 1.0]]), 0.0, seed=4)
    assert np.array_equal(a, b)


def test_gamma_one_never_needs_unconditional_branch(two_mode_model):
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = sample_latent(two_mode_model, e, 1.0, seed=9)
    direct = reverse_process(two_mode_model, 2, 9, lambda z, t: noise_net(z, t, e, two_mode_model.params).data)
    assert np.array_equal(got, two_mode_model.to_latent(direct))


def test_guided_eps_mixes_branches(two_mode_model):
    p = two_mode_model.params
    z, e = np.array([[0.1, -0.2]]), np.array([[1.0, 0.0]])
    u, c = noise_net(z, 5, np.zeros_like(e), p).data, noise_net(z, 5, e, p).data
    assert np.array_equal(guided_eps(z, 5, e, 1.7, p), cfg_mix(u, c, 1.7))


def test_sampling_deterministic_and_conditional(two_mode_model):
    e = np.repeat(np.eye(2), 100, axis=0)
    a = sample_latent(two_mode_model, e, 1.0, seed=1)
    assert np.array_equal(a, sample_latent(two_mode_model, e, 1.0, seed=1))
    assert a[:100].mean() > 0.5 and a[100:].mean() < -0.5


def test_sampling_requires_descriptor_for_guidance(two_mode_model):
    with pytest.raises(ValueError):
        sample_latent(two_mode_model, None, 1.0, seed=0, n=3)
    with pytest.raises(ValueError):
        sample_latent(two_mode_model, np.eye(2), -1.0, seed=0)
    assert sample_latent(two_mode_model, None, 0.0, seed=0, n=3).shape == (3, 2)


def test_one_d_known_distribution():
    rng = np.random.default_rng(0)
    Z = 2.0 + math.sqrt(0.1) * rng.standard_normal((1000, 1))
    cfg = LDMConfig(T=50, hidden=(32, 32), d_t=16, steps=500, p_drop=1.0, standardize=False)
    m = ldm_train(Z, np.zeros((1000, 1)), cfg, seed=0)
    s = sample_latent(m, None, 0.0, seed=1, n=1000)
    assert 1.5 <= s.mean() <= 2.5


# classifier guidance


@pytest.fixture(scope="module")
def guidance_parts(two_mode_model):
    theta, _ = init_hnet(HyperConfig(d_in=2, hidden=(8,)), 12, 0)
    clip = init_clip(CLIPConfig(hidden=8, d_embed=2), 12, 0)
    return two_mode_model, clip, theta


def test_eta_zero_returns_conditional_eps(guidance_parts):
    model, clip, theta = guidance_parts
    z, e = np.array([[0.3, 0.4]]), np.array([[1.0, 0.0]])
    assert np.array_equal(classifier_guided_eps(z, 7, e, 0.0, model, clip, theta),
                          noise_net(z, 7, e, model.params).data)
    with pytest.raises(ValueError):
        classifier_guided_eps(z, 7, e, -1.0, model, clip, theta)


def test_likelihood_grad_matches_finite_diff(guidance_parts):
    model, clip, theta = guidance_parts
    s0, e = np.array([[0.3, -0.8]]), np.array([[0.6, 0.8]])
    g = clip_log_likelihood_grad(s0, e, model, clip, theta, 10.0)

    def f(v):
        emb = hyperclip_encode(hnet_forward(Tensor(v) * model.scale + model.mean, theta), clip).data
        return 10.0 * float(np.sum(emb * e) / (np.linalg.norm(emb) * np.linalg.norm(e)))

    assert rel_err(g, ad.finite_diff(f, s0)) < 1e-4


def test_guided_step_increases_similarity(guidance_parts):
    model, clip, theta = guidance_parts
    sched = model.schedule
    e = np.array([[0.6, 0.8]])

    def cos(s):
        emb = hyperclip_encode(hnet_forward(Tensor(model.to_latent(s)), theta), clip).data
        return float(np.sum(emb * e) / (np.linalg.norm(emb) * np.linalg.norm(e)))

    z, t = np.array([[0.2, -0.5]]), 15
    plain = ddpm_step(z, t, classifier_guided_eps(z, t, e, 0.0, model, clip, theta), np.zeros((1, 2)), sched)
    guided = ddpm_step(z, t, classifier_guided_eps(z, t, e, 0.05, model, clip, theta), np.zeros((1, 2)), sched)
    assert cos(guided) >= cos(plain)


def test_classifier_guidance_mix_arithmetic():
    out = classifier_guidance_mix(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 2.0, 0.3)
    assert np.allclose(out, [1.0 - 0.3, 2.0 + 0.6], atol=1e-15)


def test_classifier_guided_sampler_runs(guidance_parts):
    model, clip, theta = guidance_parts
    z = sample_classifier_guided(model, np.array([[1.0, 0.0]]), 0.5, 3, clip, theta)
    assert z.shape == (1, 2) and np.all(np.isfinite(z))
    assert np.array_equal(sample_classifier_guided(model, np.array([[1.0, 0.0]]), 0.0, 3, clip, theta),
                          sample_latent(model, np.array([[1.0, 0.0]]), 1.0, 3))


def test_model_schedule_from_config(two_mode_model):
    assert isinstance(two_mode_model, HyperLDM)
    assert two_mode_model.schedule.T == 30
