"""Training objectives: VAE bound, regressor losses and the regressor-driven terms.

All likelihoods are Gaussian with fixed unit variance, so every
log-likelihood term reduces to a mean squared error.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, DomainError
from .flow import gaussian_log_density
from .model import frozen


@dataclass
class LossWeights:
    beta: float = 1.0
    lambda_R: float = 0.1
    lambda_c: float = 0.1
    lambda_reg: float = 0.1
    lambda_E: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    recon: float = 0.0
    kl: float = 0.0
    l_sup: float = 0.0
    l_unsup: float = 0.0
    l_c: float = 0.0
    l_reg: float = 0.0
    l_e: float = 0.0
    total_vae: float = 0.0
    total_regressor: float = 0.0
    total_generator: float = 0.0

    def to_dict(self):
        return asdict(self)


def mse(pred, target):
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    return ad.mean(ad.square(pred - target))


def reconstruction_loss(x_hat, x):
    return mse(x_hat, x)


def kl_gaussian_closed_form(mu, sigma, prior_scale):
    """KL(N(mu, sigma^2) || N(0, s^2)) summed over coordinates, averaged over rows."""
    mu, sigma = ad.as_tensor(mu), ad.as_tensor(sigma)
    if np.any(sigma.data <= 0) or prior_scale <= 0:
        raise DomainError("KL needs strictly positive scales")
    if mu.shape[-1] == 0:
        return ad.Tensor(0.0)
    s = float(prior_scale)
    per = (
        math.log(s)
        - ad.log(sigma)
        + (ad.square(sigma) + ad.square(mu)) * (1.0 / (2.0 * s * s))
        - 0.5
    )
    return ad.mean(ad.sum(per, axis=-1))


def kl_flow_mc(sample, prior_std):
    """Single-sample estimate of KL(q(z_T|x) || p(z_T)), averaged over rows."""
    if sample.zT.shape[1] == 0:
        return ad.Tensor(0.0)
    log_p = gaussian_log_density(sample.zT, 0.0, prior_std)
    return ad.mean(sample.log_q0 - sample.log_det_sum - log_p)


def vae_kl(bundle, params, sample, rng=None):
    """KL term with the estimator the config selects (closed form only when T = 0).

    The Monte-Carlo estimate averages ``sample`` with ``kl_samples - 1`` fresh draws.
    """
    cfg = bundle.cfg
    use_mc = cfg.kl_estimator == "mc" or (cfg.kl_estimator == "auto" and cfg.T > 0)
    if use_mc:
        kl = kl_flow_mc(sample, cfg.prior_std)
        extra = cfg.kl_samples - 1
        if extra > 0:
            # the extra draws go through the flow as one stacked batch
            rows = np.tile(np.arange(params.mu0.shape[0]), extra)
            stacked = type(params)(params.mu0[rows], params.sigma0[rows], params.h[rows])
            kl_extra = kl_flow_mc(bundle.posterior_sample(stacked, rng=rng), cfg.prior_std)
            kl = (kl + kl_extra * float(extra)) * (1.0 / cfg.kl_samples)
        return kl
    return kl_gaussian_closed_form(params.mu0, params.sigma0, cfg.prior_std)


def regressor_loss(a_hat_real, a, a_hat_gen, a_gen_target, weights):
    lam = weights.lambda_R if isinstance(weights, LossWeights) else float(weights)
    l_sup = mse(a_hat_real, a)
    l_unsup = mse(a_hat_gen, a_gen_target)
    return l_sup, l_unsup, l_sup + lam * l_unsup


def cyclic_loss(bundle, z_prior, a, x_gen=None):
    """MSE(R(G(z, a)), a) with the regressor held fixed."""
    if x_gen is None:
        x_gen = bundle.decode(z_prior, a)
    with frozen(bundle.regressor):
        return mse(bundle.regress(x_gen), a)


def prior_reconstruction_loss(bundle, x, a, z_prior, x_gen=None):
    """Reconstruct the real paired ``x`` from a prior-drawn latent and its sketch."""
    if x_gen is None:
        x_gen = bundle.decode(z_prior, a)
    return mse(x_gen, x)


def latent_consistency_loss(bundle, x_gen):
    """KL between the re-encoded initial posterior of ``x_gen`` and the prior."""
    if bundle.cfg.latent_dim == 0:
        return ad.Tensor(0.0)
    params = bundle.encode(x_gen)
    return kl_gaussian_closed_form(params.mu0, params.sigma0, bundle.cfg.prior_std)


def generator_total(report, weights):
    """Works on floats (a LossReport) or on a dict of tensors."""
    get = report.get if isinstance(report, dict) else (lambda k: getattr(report, k))
    total_vae = get("recon") + weights.beta * get("kl")
    return (
        total_vae
        + weights.lambda_c * get("l_c")
        + weights.lambda_reg * get("l_reg")
        + weights.lambda_E * get("l_e")
    )


def generator_terms(bundle, x, a, rng, eps=None, z_prior=None):
    """Every tensor term of the encoder/generator objective for one batch."""
    x, a = ad.as_tensor(x), ad.as_tensor(a)
    n = x.shape[0]
    params = bundle.encode(x)
    sample = bundle.posterior_sample(params, eps=eps, rng=rng)
    x_hat = bundle.decode(sample.zT, a)
    if z_prior is None:
        z_prior = bundle.prior.sample(rng, n)
    x_gen = bundle.decode(z_prior, a)
    return {
        "recon": reconstruction_loss(x_hat, x),
        "kl": vae_kl(bundle, params, sample, rng),
        "l_c": cyclic_loss(bundle, z_prior, a, x_gen),
        "l_reg": prior_reconstruction_loss(bundle, x, a, z_prior, x_gen),
        "l_e": latent_consistency_loss(bundle, x_gen),
    }


def generator_objective(bundle, x, a, weights, rng, eps=None, z_prior=None):
    terms = generator_terms(bundle, x, a, rng, eps, z_prior)
    return generator_total(terms, weights), terms
