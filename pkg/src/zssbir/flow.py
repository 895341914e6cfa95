"""Inverse autoregressive flow built from masked (MADE) networks.

Each step maps ``z_prev -> mu + sigma * z_prev`` where ``mu`` and ``sigma``
for coordinate ``i`` depend only on coordinates of lower degree plus an
unmasked context vector ``h``. The Jacobian is therefore triangular with
``sigma`` on the diagonal, and ``log|det| = sum(log sigma)``.

The gate is ``sigma = sigmoid(s + gate_bias)`` and the shift is the gated
mean ``mu = (1 - sigma) * m`` so that a large gate bias starts every step
close to the identity map.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, NumericError
from .nn import Module, xavier_uniform

LOG_2PI = math.log(2.0 * math.pi)


def hidden_degrees(width, dim):
    """Cyclic degree assignment in ``[0, dim-1]``; degree 0 units see only context."""
    if dim <= 1:
        return np.zeros(width, dtype=int)
    return np.arange(width) % (dim - 1) + 1


class MadeNetwork(Module):
    """Masked MLP emitting shift (``m``) and pre-gate scale (``s``) heads.

    ``order`` gives the degree (1-based) of each latent coordinate. The
    output layer starts at ``head_scale`` times the Xavier draw so a fresh
    step sits near the identity.
    """

    def __init__(self, dim, context_dim, hidden=(32, 32), order=None, rng=None, head_scale=0.01):
        rng = np.random.default_rng() if rng is None else rng
        self.dim, self.context_dim = dim, context_dim
        self.order = np.arange(1, dim + 1) if order is None else np.asarray(order, dtype=int)
        if sorted(self.order.tolist()) != list(range(1, dim + 1)):
            raise DimensionError(f"order must be a permutation of 1..{dim}")

        degs = [self.order] + [hidden_degrees(w, dim) for w in hidden]
        self.masks, self.weights, self.ctx_weights, self.biases = [], [], [], []
        for prev, cur in zip(degs[:-1], degs[1:]):
            self._add_layer((cur[:, None] >= prev[None, :]).astype(np.float64), rng)
        out_mask = (self.order[:, None] > degs[-1][None, :]).astype(np.float64)
        self._add_layer(np.vstack([out_mask, out_mask]), rng, head_scale)

    def _add_layer(self, mask, rng, scale=1.0):
        n_out, n_in = mask.shape
        self.masks.append(mask)
        W = scale * xavier_uniform(rng, n_out, n_in)
        C = scale * xavier_uniform(rng, n_out, max(self.context_dim, 1))[:, : self.context_dim]
        self.weights.append(ad.Tensor(W, requires_grad=True))
        self.ctx_weights.append(ad.Tensor(C, requires_grad=True))
        self.biases.append(ad.Tensor(np.zeros(n_out), requires_grad=True))

    def __call__(self, v, h):
        if v.shape[-1] != self.dim:
            raise DimensionError(f"MADE expects latent width {self.dim}, got {v.shape[-1]}")
        if h.shape[-1] != self.context_dim:
            raise DimensionError(f"MADE expects context width {self.context_dim}, got {h.shape[-1]}")
        x = v
        last = len(self.weights) - 1
        for i, (mask, W, C, b) in enumerate(zip(self.masks, self.weights, self.ctx_weights, self.biases)):
            pre = x @ (W * mask).T + b
            if self.context_dim:
                pre = pre + h @ C.T
            x = pre if i == last else ad.relu(pre)
        m, s = ad.split(x, [self.dim, self.dim], axis=1)
        return m, s

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for i, (W, C, b) in enumerate(zip(self.weights, self.ctx_weights, self.biases)):
            out[f"{prefix}{i}.W"] = W
            out[f"{prefix}{i}.C"] = C
            out[f"{prefix}{i}.b"] = b
        return out


def made_forward(net, v, h):
    return net(v, h)


class IafStep(Module):
    def __init__(self, dim, context_dim, hidden=(32, 32), order=None, gate_bias=2.0, rng=None,
                 head_scale=0.01):
        self.made = MadeNetwork(dim, context_dim, hidden, order, rng, head_scale)
        self.gate_bias = gate_bias
        # (mu, sigma) pinned in place of the network, e.g. (0.0, 1.0) for identity
        self.forced = None

    @property
    def dim(self):
        return self.made.dim

    def shift_scale(self, z_prev, h):
        """(mu, sigma, log_sigma) of this step evaluated at ``z_prev``."""
        m, s = self.made(z_prev, h)
        gated = s + self.gate_bias
        sigma = ad.sigmoid(gated)
        mu = (1.0 - sigma) * m
        return mu, sigma, ad.log_sigmoid(gated)

    def apply(self, z_prev, h, override=None):
        """Return ``(z_next, log_det)`` with one log-det per batch row.

        ``override=(mu, sigma)`` bypasses the network (test hook).
        """
        if override is None:
            override = self.forced
        if override is not None:
            shape = z_prev.shape
            mu, sigma = (ad.Tensor(np.broadcast_to(np.asarray(o, dtype=np.float64), shape))
                         for o in override)
            log_sigma = ad.log(sigma)
        else:
            mu, sigma, log_sigma = self.shift_scale(z_prev, h)
        if ad.is_strict() and not np.all(np.isfinite(sigma.data)):
            raise NumericError("non-finite flow scale")
        z_next = mu + sigma * z_prev
        return z_next, ad.sum(log_sigma, axis=1)

    def invert(self, z_next, h):
        """Recover ``z_prev`` one coordinate at a time in degree order."""
        z_next = np.asarray(z_next.data if isinstance(z_next, ad.Tensor) else z_next, dtype=np.float64)
        h = ad.as_tensor(h)
        if self.forced is not None:
            mu, sigma = (np.broadcast_to(np.asarray(o, dtype=np.float64), z_next.shape)
                         for o in self.forced)
            return (z_next - mu) / sigma
        z = np.zeros_like(z_next)
        with ad.no_grad():
            for i in np.argsort(self.made.order):
                mu, sigma, _ = self.shift_scale(ad.Tensor(z), h)
                z[:, i] = (z_next[:, i] - mu.data[:, i]) / sigma.data[:, i]
        return z

    def named_parameters(self, prefix=""):
        return self.made.named_parameters(prefix + "made.")


def iaf_step_apply(step, z_prev, h, override=None):
    return step.apply(z_prev, h, override)


def iaf_step_invert(step, z_next, h):
    return step.invert(z_next, h)


@dataclass
class FlowSample:
    z0: ad.Tensor
    zT: ad.Tensor
    eps: object
    log_det_sum: ad.Tensor
    log_q0: ad.Tensor

    @property
    def log_q(self):
        """log q(z_T | x) per row."""
        return self.log_q0 - self.log_det_sum


class FlowChain(Module):
    """T IAF steps whose degree orderings alternate natural/reversed."""

    def __init__(self, dim, context_dim, T=3, hidden=(32, 32), gate_bias=2.0, rng=None,
                 head_scale=0.01):
        rng = np.random.default_rng() if rng is None else rng
        self.dim, self.context_dim = dim, context_dim
        natural = np.arange(1, dim + 1)
        self.steps = [
            IafStep(dim, context_dim, hidden, natural if t % 2 == 0 else natural[::-1],
                    gate_bias, rng, head_scale)
            for t in range(T)
        ]

    @property
    def T(self):
        return len(self.steps)

    def forward(self, z0, log_q0, h, eps=None):
        z = z0
        log_det = ad.Tensor(np.zeros(z0.shape[0]))
        for step in self.steps:
            z, ld = step.apply(z, h)
            log_det = log_det + ld
        return FlowSample(z0=z0, zT=z, eps=eps, log_det_sum=log_det, log_q0=log_q0)

    __call__ = forward

    def invert(self, zT, h):
        z = np.asarray(zT.data if isinstance(zT, ad.Tensor) else zT, dtype=np.float64)
        for step in reversed(self.steps):
            z = step.invert(z, h)
        return z

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for t, step in enumerate(self.steps):
            out.update(step.named_parameters(f"{prefix}step{t}."))
        return out


def flow_forward(chain, z0, log_q0, h, eps=None):
    return chain.forward(z0, log_q0, h, eps)


def gaussian_log_density(z, mu, sigma):
    """Row-wise log N(z; mu, diag(sigma^2)) for tensors."""
    u = (z - mu) / sigma
    per = -ad.log(sigma) - 0.5 * LOG_2PI - 0.5 * ad.square(u)
    return ad.sum(per, axis=1)


def flow_log_density(chain, sample):
    """log q(z_T | x) along the path that produced ``sample``."""
    if not isinstance(sample, FlowSample):
        raise ContractError(
            "density of an arbitrary point needs its path; use log_density_by_inversion"
        )
    return sample.log_q


def log_density_by_inversion(chain, zT, mu0, sigma0, h):
    """Density of arbitrary points: invert the chain, then change variables forward."""
    h = ad.as_tensor(h)
    with ad.no_grad():
        z0 = ad.Tensor(chain.invert(zT, h))
        log_q0 = gaussian_log_density(z0, ad.as_tensor(mu0), ad.as_tensor(sigma0))
        sample = chain.forward(z0, log_q0, h)
    return sample.log_q.data
