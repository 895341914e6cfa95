"""Finite-difference verification of every differentiable piece, from ops to the full objective."""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .flow import FlowChain, IafStep, MadeNetwork, gaussian_log_density
from .model import ModelBundle, build_config, frozen
from .nn import MLP, Linear, ResidualBlock

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self):
        return self.error <= TOLERANCE


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape))


def _weighted(rng, shape):
    return ad.Tensor(rng.normal(size=shape))


def op_checks(rng):
    x = _t(rng, 3, 4)
    pos = _t(rng, 3, 4, lo=0.5, hi=2.0)
    w = _weighted(rng, (3, 4))
    unary = {
        "exp": (ad.exp, x), "log": (ad.log, pos), "sigmoid": (ad.sigmoid, x),
        "softplus": (ad.softplus, x), "square": (ad.square, x), "relu": (ad.relu, pos),
        "sqrt": (ad.sqrt, pos), "log_sigmoid": (ad.log_sigmoid, x), "neg": (ad.neg, x),
    }
    for name, (fn, inp) in unary.items():
        yield f"op/{name}", (lambda t, fn=fn: ad.sum(fn(t) * w)), [inp]
    for name in ("add", "sub", "mul", "div"):
        fn = getattr(ad, name)
        yield f"op/{name}", (lambda a, b, fn=fn: ad.sum(fn(a, b) * w)), [_t(rng, 3, 4), _t(rng, 1, 4, lo=0.5, hi=2)]
    yield "op/matmul", (lambda a, b: ad.sum(a @ b)), [_t(rng, 3, 4), _t(rng, 4, 2)]
    yield "op/transpose", (lambda a: ad.sum(ad.transpose(a) * ad.transpose(w))), [_t(rng, 3, 4)]
    yield "op/reshape", (lambda a: ad.sum(ad.square(ad.reshape(a, (2, 6))))), [_t(rng, 3, 4)]
    yield "op/take", (lambda a: ad.sum(ad.square(a[1:, ::2]))), [_t(rng, 3, 4)]
    yield "op/concat", (lambda a, b: ad.sum(ad.square(ad.concat([a, b], axis=1)))), [_t(rng, 3, 2), _t(rng, 3, 4)]
    yield "op/split", (lambda a: ad.sum(ad.square(ad.split(a, [1, 3], axis=1)[1]))), [_t(rng, 3, 4)]
    yield "op/sum", (lambda a: ad.sum(ad.square(ad.sum(a, axis=0)))), [_t(rng, 3, 4)]
    yield "op/mean", (lambda a: ad.sum(ad.square(ad.mean(a, axis=1)))), [_t(rng, 3, 4)]


def layer_checks(rng):
    x = _t(rng, 5, 6)
    for act in ("identity", "relu", "sigmoid"):
        layer = Linear(6, 4, act, rng)
        layer.b.data[...] = rng.normal(size=4) * 0.1
        w = _weighted(rng, (5, 4))
        yield f"layer/linear-{act}", (lambda x, W, b, layer=layer, w=w: ad.sum(layer(x) * w)), [x, layer.W, layer.b]
    block = ResidualBlock(6, 5, depth=2, activation="sigmoid", rng=rng)
    w = _weighted(rng, (5, 5))
    yield "layer/residual", (lambda x, *_: ad.sum(block(x) * w)), [x, *block.parameters()]
    mlp = MLP(6, [7], 3, hidden="sigmoid", rng=rng)
    yield "layer/mlp", (lambda x, *_: ad.sum(ad.square(mlp(x)))), [x, *mlp.parameters()]


def flow_checks(rng):
    d, ctx = 4, 3
    v, h = _t(rng, 5, d), _t(rng, 5, ctx)
    made = MadeNetwork(d, ctx, hidden=(6,), rng=rng, head_scale=1.0)
    wm, ws = _weighted(rng, (5, d)), _weighted(rng, (5, d))

    def made_loss(v, h, *_):
        m, s = made(v, h)
        return ad.sum(m * wm) + ad.sum(s * ws)

    yield "flow/made", made_loss, [v, h, *made.parameters()]
    step = IafStep(d, ctx, hidden=(6,), rng=rng, head_scale=1.0)

    def step_loss(z, h, *_):
        z_next, log_det = step.apply(z, h)
        return ad.sum(ad.square(z_next)) + ad.sum(log_det)

    yield "flow/iaf-step", step_loss, [_t(rng, 5, d), h, *step.parameters()]
    chain = FlowChain(d, ctx, T=3, hidden=(6,), rng=rng, head_scale=1.0)
    mu0, sigma0 = _t(rng, 5, d), _t(rng, 5, d, lo=0.5, hi=1.5)
    eps = rng.standard_normal((5, d))

    def chain_loss(mu0, sigma0, h, *_):
        z0 = mu0 + sigma0 * eps
        sample = chain.forward(z0, gaussian_log_density(z0, mu0, sigma0), h)
        return ad.sum(ad.square(sample.zT)) + ad.sum(sample.log_q)

    yield "flow/chain", chain_loss, [mu0, sigma0, h, *chain.parameters()]


def loss_checks(rng):
    b = ModelBundle(build_config("gradcheck"), rng)
    n = 4
    x = ad.Tensor(rng.random((n, 16)))
    a = ad.Tensor(rng.random((n, 8)))
    eps = rng.standard_normal((n, 4))
    z_prior = b.prior.sample(rng, n)
    target = rng.random((n, 16))
    yield "loss/reconstruction", (lambda xh: losses.reconstruction_loss(xh, target)), [ad.Tensor(rng.random((n, 16)))]
    s = 0.7
    yield "loss/kl-closed", (lambda mu, sg: losses.kl_gaussian_closed_form(mu, sg, s)), \
        [_t(rng, n, 4), _t(rng, n, 4, lo=0.3, hi=1.5)]

    def kl_mc(*_):
        return losses.kl_flow_mc(b.posterior_sample(b.encode(x), eps=eps), b.cfg.prior_std)

    yield "loss/kl-flow-mc", kl_mc, list(b.encoder_params().values())
    x_gen = ad.Tensor(rng.random((n, 16)))

    def reg_loss(*_):
        return losses.regressor_loss(b.regress(x), a, b.regress(x_gen), a, 0.1)[2]

    yield "loss/regressor", reg_loss, list(b.regressor_params().values())
    yield "loss/cyclic", (lambda *_: losses.cyclic_loss(b, z_prior, a)), list(b.generator_params().values())
    yield "loss/prior-reconstruction", (lambda *_: losses.prior_reconstruction_loss(b, x, a, z_prior)), \
        list(b.generator_params().values())
    g_and_e = list(b.encoder_params().values()) + list(b.generator_params().values())
    yield "loss/latent-consistency", \
        (lambda *_: losses.latent_consistency_loss(b, b.decode(z_prior, a))), g_and_e


def objective_checks(rng):
    """The full encoder/generator objective and the regressor objective at desk dims."""
    b = ModelBundle(build_config("gradcheck"), rng)
    n = 4
    x = ad.Tensor(rng.random((n, 16)))
    a = ad.Tensor(rng.random((n, 8)))
    eps = rng.standard_normal((n, 4))
    z_prior = b.prior.sample(rng, n)
    weights = losses.LossWeights()

    def full(*_):
        with frozen(b.regressor):
            return losses.generator_objective(b, x, a, weights, None, eps, z_prior)[0]

    yield "objective/generator", full, list(b.encoder_params().values()) + list(b.generator_params().values())
    with ad.no_grad():
        x_gen = b.decode(b.posterior_sample(b.encode(x), eps=eps).zT, a)

    def reg(*_):
        return losses.regressor_loss(b.regress(x), a, b.regress(x_gen), a, weights)[2]

    yield "objective/regressor", reg, list(b.regressor_params().values())


SUITES = (op_checks, layer_checks, flow_checks, loss_checks, objective_checks)


def run(seed=0, fault=None, h=1e-5):
    """Run every check; ``fault`` names an elementwise rule to corrupt for the whole run."""
    rng = np.random.default_rng(seed)
    results = []
    for suite in SUITES:
        for name, fn, inputs in suite(rng):
            t0 = time.perf_counter()
            if fault is None:
                err = ad.grad_check(fn, inputs, h=h)
            else:
                with ad.corrupted_rule(fault):
                    err = ad.grad_check(fn, inputs, h=h)
            results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  max rel err  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.error:11.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
