import math

import numpy as np
import pytest

from zssbir import autodiff as ad
from zssbir import losses, model
from zssbir.errors import DimensionError, DomainError
from zssbir.flow import FlowChain, gaussian_log_density


def bundle(variant="feedback-vae", seed=0, **kw):
    return model.ModelBundle(model.build_config("gradcheck", variant=variant, **kw),
                             np.random.default_rng(seed))


def batch(seed=1, n=5):
    rng = np.random.default_rng(seed)
    return rng.random((n, 16)), rng.random((n, 8))


def test_weights_validation():
    with pytest.raises(DomainError):
        losses.LossWeights(beta=-1.0)
    with pytest.raises(DomainError):
        losses.LossWeights(lambda_c=float("nan"))


def test_reconstruction_examples():
    x = np.random.default_rng(0).random((4, 3))
    assert losses.reconstruction_loss(x, x).item() == 0.0
    assert losses.reconstruction_loss(x + 0.1, x).item() == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(DimensionError):
        losses.reconstruction_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_reconstruction_gradient():
    rng = np.random.default_rng(1)
    xh = ad.Tensor(rng.random((4, 3)), requires_grad=True)
    x = rng.random((4, 3))
    ad.backward(losses.reconstruction_loss(xh, x))
    np.testing.assert_allclose(xh.grad, 2 * (xh.data - x) / 12, rtol=1e-14)
    assert ad.grad_check(lambda t: losses.reconstruction_loss(t, x), xh) <= 1e-8


def test_closed_form_kl_examples():
    s = 0.3
    assert losses.kl_gaussian_closed_form(np.zeros((2, 3)), np.full((2, 3), s), s).item() == pytest.approx(0.0, abs=1e-15)
    assert losses.kl_gaussian_closed_form([[s]], [[s]], s).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DomainError):
        losses.kl_gaussian_closed_form([[0.0]], [[0.0]], s)
    with pytest.raises(DomainError):
        losses.kl_gaussian_closed_form([[0.0]], [[1.0]], 0.0)


def test_closed_form_kl_hand_value():
    mu, sigma, s = 0.2, 0.5, 2.0
    hand = math.log(s / sigma) + (sigma ** 2 + mu ** 2) / (2 * s ** 2) - 0.5
    got = losses.kl_gaussian_closed_form([[mu, mu]], [[sigma, sigma]], s).item()
    assert got == pytest.approx(2 * hand, abs=1e-14)


def test_closed_form_kl_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(100):
        mu = rng.normal(size=(3, 4)) * 3
        sigma = rng.uniform(0.01, 5, size=(3, 4))
        assert losses.kl_gaussian_closed_form(mu, sigma, rng.uniform(0.01, 5)).item() >= 0.0


def t0_sample(mu, sigma, eps):
    mu, sigma = ad.as_tensor(mu), ad.as_tensor(sigma)
    z0 = mu + sigma * eps
    lq0 = gaussian_log_density(z0, mu, sigma)
    chain = FlowChain(mu.shape[1], 0, T=0)
    return chain.forward(z0, lq0, ad.Tensor(np.zeros((mu.shape[0], 0))), eps)


def test_flow_kl_unbiased_at_t0():
    rng = np.random.default_rng(3)
    n = 100_000
    mu = np.tile([0.4, -0.2, 0.1], (n, 1))
    sigma = np.tile([0.8, 1.5, 0.3], (n, 1))
    s = 1.1
    with ad.no_grad():
        sample = t0_sample(mu, sigma, rng.standard_normal((n, 3)))
        per_row = (sample.log_q - gaussian_log_density(sample.zT, 0.0, s)).data
    closed = losses.kl_gaussian_closed_form(mu[:1], sigma[:1], s).item()
    se = per_row.std() / math.sqrt(n)
    assert abs(per_row.mean() - closed) <= 3 * se
    assert abs(per_row.mean() - closed) <= 0.01 * closed
    assert losses.kl_flow_mc(sample, s).item() == pytest.approx(per_row.mean(), rel=1e-12)


def test_flow_kl_identity_steps_match_t0():
    rng = np.random.default_rng(4)
    mu, sigma = rng.normal(size=(6, 2)), rng.uniform(0.5, 1.5, size=(6, 2))
    eps = rng.standard_normal((6, 2))
    base = losses.kl_flow_mc(t0_sample(mu, sigma, eps), 0.7).item()
    chain = FlowChain(2, 0, T=3, rng=rng)
    for st in chain.steps:
        st.forced = (0.0, 1.0)
    z0 = ad.Tensor(mu + sigma * eps)
    lq0 = gaussian_log_density(z0, ad.Tensor(mu), ad.Tensor(sigma))
    sample = chain.forward(z0, lq0, ad.Tensor(np.zeros((6, 0))))
    assert losses.kl_flow_mc(sample, 0.7).item() == base


def test_flow_kl_differentiable():
    b = bundle()
    x, _ = batch()
    eps = np.random.default_rng(5).standard_normal((5, 4))

    def f():
        return losses.kl_flow_mc(b.posterior_sample(b.encode(x), eps=eps), 0.5)

    for p in b.encoder_params().values():
        assert ad.grad_check(lambda _: f(), p) <= 1e-5


def test_regressor_loss_examples():
    a = np.random.default_rng(6).random((3, 2))
    l_sup, l_unsup, total = losses.regressor_loss(a, a, a, a, losses.LossWeights())
    assert total.item() == 0.0
    b = a + 0.5
    l_sup, l_unsup, total = losses.regressor_loss(b, a, a, b, losses.LossWeights(lambda_R=0.0))
    assert total.item() == l_sup.item() == pytest.approx(0.25)


def test_regressor_loss_touches_only_regressor():
    b = bundle()
    x, a = batch()
    with ad.no_grad():
        x_gen = b.decode(b.prior.sample(np.random.default_rng(0), 5), a).data
    with model.frozen(*b.encoder_modules, b.generator):
        _, _, total = losses.regressor_loss(b.regress(x), a, b.regress(x_gen), a, losses.LossWeights())
    b.zero_grad()
    ad.backward(total)
    for p in list(b.encoder_params().values()) + list(b.generator_params().values()):
        assert p.grad is None or not np.any(p.grad)
    assert any(np.any(p.grad) for p in b.regressor_params().values())


def test_generator_objective_leaves_regressor_untouched():
    b = bundle()
    x, a = batch()
    total, _ = losses.generator_objective(b, x, a, losses.LossWeights(), np.random.default_rng(0))
    b.zero_grad()
    ad.backward(total)
    for p in b.regressor_params().values():
        assert p.grad is None or not np.any(p.grad)
    assert any(np.any(p.grad) for p in b.generator_params().values())
    assert any(np.any(p.grad) for p in b.encoder_params().values())


def test_cyclic_loss_zero_when_regressor_inverts_generator():
    b = bundle("feedback-auto")
    # linear sigmoid-free path: make G output a constant and R return a
    a = np.full((3, 8), 0.25)
    x_gen = ad.Tensor(np.full((3, 16), 0.5))
    for p in b.regressor.parameters():
        p.data[...] = 0.0
    b.regressor.layers[-1].b.data[...] = 0.25
    assert losses.cyclic_loss(b, np.zeros((3, 0)), a, x_gen).item() == 0.0


def test_prior_reconstruction_equals_reconstruction_for_auto():
    b = bundle("feedback-auto")
    x, a = batch()
    x_hat = b.decode(np.zeros((5, 0)), a)
    assert losses.prior_reconstruction_loss(b, x, a, np.zeros((5, 0))).item() == \
        losses.reconstruction_loss(x_hat, x).item()


def test_prior_reconstruction_differentiable():
    b = bundle()
    x, a = batch()
    z = b.prior.sample(np.random.default_rng(7), 5)
    for p in b.generator.parameters():
        assert ad.grad_check(lambda _: losses.prior_reconstruction_loss(b, x, a, z), p) <= 1e-5


def test_latent_consistency_properties():
    b = bundle()
    x, _ = batch()
    assert losses.latent_consistency_loss(b, x).item() >= 0.0
    for p in b.encoder.parameters():
        p.data[...] = 0.0
    # sigma0 = softplus(0) = log 2, mu0 = 0, against the prior std s
    s = b.cfg.prior_std
    hand = 4 * (math.log(s / math.log(2)) + math.log(2) ** 2 / (2 * s * s) - 0.5)
    assert losses.latent_consistency_loss(b, x).item() == pytest.approx(hand, rel=1e-12)
    assert losses.latent_consistency_loss(bundle("feedback-auto"), x).item() == 0.0


def test_latent_consistency_zero_at_prior():
    b = bundle()
    for p in b.encoder.parameters():
        p.data[...] = 0.0
    b.encoder.head.b.data[4:8] = np.log(np.expm1(b.cfg.prior_std))
    x, _ = batch()
    assert losses.latent_consistency_loss(b, x).item() == pytest.approx(0.0, abs=1e-12)


def test_generator_total_arithmetic():
    report = losses.LossReport(recon=1.0, kl=0.0, l_c=2.0, l_reg=3.0, l_e=4.0)
    w = losses.LossWeights(beta=1.0, lambda_c=1.0, lambda_reg=1.0, lambda_E=1.0)
    assert losses.generator_total(report, w) == 10.0
    w0 = losses.LossWeights(lambda_c=0.0, lambda_reg=0.0, lambda_E=0.0)
    assert losses.generator_total(report, w0) == 1.0


@pytest.mark.parametrize("term,attr", [("l_c", "lambda_c"), ("l_reg", "lambda_reg"), ("l_e", "lambda_E"),
                                       ("kl", "beta")])
def test_generator_total_affine_in_each_weight(term, attr):
    report = losses.LossReport(recon=0.7, kl=0.3, l_c=1.1, l_reg=2.3, l_e=0.9)
    vals = [losses.generator_total(report, losses.LossWeights(**{attr: lam})) for lam in (0.0, 0.5, 2.0)]
    slope = getattr(report, term)
    assert vals[1] - vals[0] == pytest.approx(0.5 * slope, abs=1e-12)
    assert vals[2] - vals[0] == pytest.approx(2.0 * slope, abs=1e-12)


def test_generator_gradient_is_weighted_sum():
    b = bundle()
    x, a = batch()
    eps = np.random.default_rng(8).standard_normal((5, 4))
    z = b.prior.sample(np.random.default_rng(9), 5)
    w = losses.LossWeights(beta=0.7, lambda_c=0.3, lambda_reg=0.2, lambda_E=0.4)
    params = list(b.generator_params().values())

    def grads_of(fn):
        b.zero_grad()
        ad.backward(fn())
        return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    total = grads_of(lambda: losses.generator_objective(b, x, a, w, None, eps, z)[0])
    parts = {k: grads_of(lambda k=k: losses.generator_terms(b, x, a, None, eps, z)[k])
             for k in ("recon", "kl", "l_c", "l_reg", "l_e")}
    coef = {"recon": 1.0, "kl": w.beta, "l_c": w.lambda_c, "l_reg": w.lambda_reg, "l_e": w.lambda_E}
    for i, g in enumerate(total):
        combo = sum(coef[k] * parts[k][i] for k in coef)
        np.testing.assert_allclose(g, combo, rtol=1e-9, atol=1e-12)


def test_no_iaf_matches_identity_flow():
    vae = bundle("feedback-vae", seed=3, kl_estimator="mc")
    flat = bundle("no-iaf", seed=4, kl_estimator="mc")
    state = {k: v for k, v in vae.state_arrays().items() if not k.startswith("E.flow.")}
    flat.load_state_arrays(state)
    for st in vae.flow.steps:
        st.forced = (0.0, 1.0)
    x, a = batch()
    eps = np.random.default_rng(10).standard_normal((5, 4))
    z = vae.prior.sample(np.random.default_rng(11), 5)
    t1 = losses.generator_terms(vae, x, a, None, eps, z)
    t2 = losses.generator_terms(flat, x, a, None, eps, z)
    for k in t1:
        assert t1[k].item() == t2[k].item(), k


def test_multi_sample_kl_same_mean_lower_variance():
    x, _ = batch(n=3)
    draws = {}
    for k in (1, 8):
        b = bundle(kl_samples=k)
        params = b.encode(x)
        rng = np.random.default_rng(0)
        vals = []
        for _ in range(400):
            sample = b.posterior_sample(params, rng=rng)
            vals.append(losses.vae_kl(b, params, sample, rng).item())
        draws[k] = np.array(vals)
    se = np.sqrt(draws[1].var() / 400 + draws[8].var() / 400)
    assert abs(draws[1].mean() - draws[8].mean()) < 4 * se
    assert draws[8].var() < draws[1].var() / 4
