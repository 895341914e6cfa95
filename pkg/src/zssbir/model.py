"""Encoder + IAF posterior, residual conditional generator, and regressor."""

import contextlib
import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .flow import FlowChain, FlowSample, gaussian_log_density
from .nn import MLP, Linear, Module, ResidualBlock

VARIANTS = ("feedback-vae", "feedback-auto", "no-iaf")


@dataclass
class ModelConfig:
    feature_dim: int = 32
    attr_dim: int = 32
    latent_dim: int = 8
    T: int = 3
    prior_scale: float = 0.005
    prior_scale_is_variance: bool = False
    encoder_widths: tuple = (128, 128)
    decoder_width: int = 192
    decoder_blocks: int = 2
    regressor_widths: tuple = (128, 128)
    context_dim: int = -1  # -1: twice the latent width
    made_hidden: tuple = (32, 32)
    gate_bias: float = 2.0
    kl_estimator: str = "auto"  # auto | closed | mc
    kl_samples: int = 1  # posterior draws averaged by the Monte-Carlo KL
    variant: str = "feedback-vae"

    def __post_init__(self):
        for name in ("encoder_widths", "regressor_widths", "made_hidden"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.variant == "feedback-auto":
            self.latent_dim, self.T = 0, 0
        elif self.variant == "no-iaf":
            self.T = 0
        if self.context_dim < 0:
            self.context_dim = 2 * self.latent_dim
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self):
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "no-iaf" and self.latent_dim <= 0:
            out.append("no-iaf variant needs latent_dim > 0")
        if self.prior_scale <= 0:
            out.append("prior_scale must be positive")
        if self.feature_dim <= 0 or self.attr_dim <= 0:
            out.append("feature_dim and attr_dim must be positive")
        if self.latent_dim < 0 or self.T < 0:
            out.append("latent_dim and T must be non-negative")
        if self.decoder_blocks < 1:
            out.append("decoder_blocks must be >= 1")
        if self.kl_samples < 1:
            out.append(f"kl_samples must be >= 1, got {self.kl_samples}")
        if self.kl_estimator not in ("auto", "closed", "mc"):
            out.append(f"kl_estimator must be auto, closed or mc, got {self.kl_estimator!r}")
        return out

    @property
    def prior_std(self):
        return float(np.sqrt(self.prior_scale)) if self.prior_scale_is_variance else self.prior_scale

    def canonical_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines)

    def fingerprint(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "desk": {},
    "paper": dict(
        feature_dim=2048,
        attr_dim=2048,
        latent_dim=64,
        encoder_widths=(4096, 4096),
        decoder_width=6144,
        decoder_blocks=5,
        regressor_widths=(4096, 4096),
    ),
    "gradcheck": dict(
        feature_dim=16,
        attr_dim=8,
        latent_dim=4,
        T=3,
        encoder_widths=(8,),
        decoder_width=8,
        decoder_blocks=2,
        regressor_widths=(8,),
        made_hidden=(8,),
    ),
}


@dataclass
class PosteriorParams:
    mu0: ad.Tensor
    sigma0: ad.Tensor
    h: ad.Tensor


@dataclass
class PriorDistribution:
    std: float
    dim: int

    def sample(self, rng, n):
        return self.std * rng.standard_normal((n, self.dim))

    def log_density(self, z):
        z = ad.as_tensor(z)
        return gaussian_log_density(z, 0.0, self.std)


class Encoder(Module):
    def __init__(self, cfg, rng, head_scale=0.01):
        self.cfg = cfg
        self.trunk = MLP(cfg.feature_dim, cfg.encoder_widths[:-1], cfg.encoder_widths[-1],
                         final="relu", rng=rng)
        n_out = 2 * cfg.latent_dim + cfg.context_dim
        self.head = Linear(cfg.encoder_widths[-1], n_out, rng=rng)
        # start the posterior on top of the prior: mu0 ~ 0, sigma0 ~ prior std
        L = cfg.latent_dim
        self.head.W.data[: 2 * L] *= head_scale
        self.head.b.data[L : 2 * L] = np.log(np.expm1(cfg.prior_std))

    def __call__(self, x):
        out = self.head(self.trunk(x))
        L, C = self.cfg.latent_dim, self.cfg.context_dim
        mu0, raw, h = ad.split(out, [L, L, C], axis=1)
        return PosteriorParams(mu0, ad.softplus(raw), h)

    def named_parameters(self, prefix=""):
        out = self.trunk.named_parameters(prefix + "trunk.")
        out.update(self.head.named_parameters(prefix + "head."))
        return out


class Generator(Module):
    """concat(z, a) -> residual stack -> sigmoid output."""

    def __init__(self, cfg, rng):
        width = cfg.decoder_width
        self.in_dim = cfg.latent_dim + cfg.attr_dim
        self.blocks = [ResidualBlock(self.in_dim, width, rng=rng)]
        self.blocks += [ResidualBlock(width, width, rng=rng) for _ in range(cfg.decoder_blocks - 1)]
        self.out = Linear(width, cfg.feature_dim, "sigmoid", rng)

    def __call__(self, z, a):
        y = ad.concat([z, a], axis=1) if z.shape[1] else a
        for block in self.blocks:
            y = block(y)
        return self.out(y)

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}block{i}."))
        out.update(self.out.named_parameters(prefix + "out."))
        return out


@contextlib.contextmanager
def frozen(*modules):
    """Treat the modules' parameters as constants inside the block."""
    params = [p for m in modules for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


class ModelBundle:
    """Encoder (+flow), generator and regressor with disjoint parameter sets."""

    def __init__(self, cfg, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.prior = PriorDistribution(cfg.prior_std, cfg.latent_dim)
        self.encoder = Encoder(cfg, rng) if cfg.latent_dim > 0 else None
        self.flow = (
            FlowChain(cfg.latent_dim, cfg.context_dim, cfg.T, cfg.made_hidden, cfg.gate_bias, rng)
            if cfg.latent_dim > 0
            else None
        )
        self.generator = Generator(cfg, rng)
        self.regressor = MLP(cfg.feature_dim, cfg.regressor_widths, cfg.attr_dim, rng=rng)

    # parameter partitions
    def encoder_params(self):
        out = OrderedDict()
        if self.encoder is not None:
            out.update(self.encoder.named_parameters("E.enc."))
            out.update(self.flow.named_parameters("E.flow."))
        return out

    def generator_params(self):
        return self.generator.named_parameters("G.")

    def regressor_params(self):
        return self.regressor.named_parameters("R.")

    def named_parameters(self):
        out = self.encoder_params()
        out.update(self.generator_params())
        out.update(self.regressor_params())
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    @property
    def encoder_modules(self):
        return [m for m in (self.encoder, self.flow) if m is not None]

    # forward passes
    def encode(self, x):
        x = ad.as_tensor(x)
        if x.shape[1] != self.cfg.feature_dim:
            raise DimensionError(f"encoder expects width {self.cfg.feature_dim}, got {x.shape[1]}")
        if self.encoder is None:
            empty = ad.Tensor(np.zeros((x.shape[0], 0)))
            return PosteriorParams(empty, empty, empty)
        return self.encoder(x)

    def posterior_sample(self, params, eps=None, rng=None):
        n, L = params.mu0.shape
        if eps is None:
            rng = np.random.default_rng() if rng is None else rng
            eps = rng.standard_normal((n, L))
        eps = np.asarray(eps, dtype=np.float64).reshape(n, L)
        z0 = params.mu0 + params.sigma0 * eps
        if L == 0:
            zero = ad.Tensor(np.zeros(n))
            return FlowSample(z0=z0, zT=z0, eps=eps, log_det_sum=zero, log_q0=zero)
        log_q0 = gaussian_log_density(z0, params.mu0, params.sigma0)
        return self.flow.forward(z0, log_q0, params.h, eps)

    def decode(self, z, a):
        z, a = ad.as_tensor(z), ad.as_tensor(a)
        if a.shape[1] != self.cfg.attr_dim:
            raise DimensionError(f"decoder expects sketch width {self.cfg.attr_dim}, got {a.shape[1]}")
        if z.shape[1] != self.cfg.latent_dim or z.shape[0] != a.shape[0]:
            raise DimensionError(
                f"decoder latent {z.shape} incompatible with latent_dim {self.cfg.latent_dim} "
                f"and batch {a.shape[0]}"
            )
        return self.generator(z, a)

    def regress(self, x):
        x = ad.as_tensor(x)
        if x.shape[1] != self.cfg.feature_dim:
            raise DimensionError(f"regressor expects width {self.cfg.feature_dim}, got {x.shape[1]}")
        return self.regressor(x)

    def generate_from_prior(self, a, c, seed=None, rng=None):
        """``c`` generated image features for a single sketch vector ``a``."""
        if c < 1:
            raise ConfigError("candidate count must be >= 1")
        rng = np.random.default_rng(seed) if rng is None else rng
        a = np.asarray(a, dtype=np.float64).reshape(1, -1)
        z = self.prior.sample(rng, c)
        with ad.no_grad():
            return self.decode(z, np.repeat(a, c, axis=0)).data

    # serialization helpers
    def state_arrays(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_arrays(self, arrays):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise DimensionError(f"parameter {k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data[...] = arrays[k]


def encode(bundle, x):
    return bundle.encode(x)


def posterior_sample(bundle, params, eps=None, rng=None):
    return bundle.posterior_sample(params, eps, rng)


def decode(bundle, z, a):
    return bundle.decode(z, a)


def regress(bundle, x):
    return bundle.regress(x)


def generate_from_prior(bundle, a, c, seed=None):
    return bundle.generate_from_prior(a, c, seed)


def build_config(preset="desk", **overrides):
    base = dict(PRESETS[preset])
    base.update(overrides)
    return ModelConfig(**base)


def config_from_dict(d):
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in d.items() if k in known})

