"""Dense layers, residual blocks, Adam and the step-wise learning-rate schedule."""

import bisect
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError

ACTIVATIONS = {
    "identity": ad.identity,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
}


def xavier_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Module:
    """Anything owning named parameters."""

    def named_parameters(self, prefix=""):
        raise NotImplementedError

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, in_dim, out_dim, activation="identity", rng=None):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.W = ad.Tensor(xavier_uniform(rng, out_dim, in_dim), requires_grad=True)
        self.b = ad.Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"linear layer expects width {self.in_dim}, got {x.shape[-1]}")
        return ACTIVATIONS[self.activation](x @ self.W.T + self.b)

    def named_parameters(self, prefix=""):
        return OrderedDict([(prefix + "W", self.W), (prefix + "b", self.b)])


def linear_forward(layer, x):
    return layer(x)


class MLP(Module):
    """Stack of :class:`Linear` layers; ``hidden`` activation on all but the last."""

    def __init__(self, in_dim, widths, out_dim, hidden="relu", final="identity", rng=None):
        dims = [in_dim, *widths, out_dim]
        acts = [hidden] * len(widths) + [final]
        self.layers = [Linear(i, o, a, rng) for i, o, a in zip(dims[:-1], dims[1:], acts)]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}{i}."))
        return out


class ResidualBlock(Module):
    """``f_in(x) + x``, or ``f_in(x) + P x`` when the widths differ."""

    def __init__(self, in_dim, out_dim, depth=1, activation="relu", project=True, rng=None):
        if in_dim != out_dim and not project:
            raise ConfigError(
                f"residual block {in_dim}->{out_dim} changes width but has no projection"
            )
        dims = [in_dim] + [out_dim] * depth
        self.inner = [Linear(i, o, activation, rng) for i, o in zip(dims[:-1], dims[1:])]
        self.projection = Linear(in_dim, out_dim, "identity", rng) if in_dim != out_dim else None

    def __call__(self, x):
        y = x
        for layer in self.inner:
            y = layer(y)
        skip = x if self.projection is None else self.projection(x)
        return y + skip

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for i, layer in enumerate(self.inner):
            out.update(layer.named_parameters(f"{prefix}inner{i}."))
        if self.projection is not None:
            out.update(self.projection.named_parameters(prefix + "proj."))
        return out


def residual_forward(block, x):
    return block(x)


@dataclass
class LrSchedule:
    """Piecewise-constant rate: ``rates[i]`` is active from epoch ``thresholds[i]``."""

    thresholds: list = field(default_factory=lambda: [0, 5, 15, 25])
    rates: list = field(default_factory=lambda: [1e-3, 5e-4, 1e-4, 1e-5])

    def __post_init__(self):
        if len(self.thresholds) != len(self.rates) or not self.rates:
            raise ConfigError("schedule needs one rate per threshold")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError("schedule thresholds must be strictly increasing")
        if any(b >= a for a, b in zip(self.rates, self.rates[1:])):
            raise ConfigError("schedule rates must be strictly decreasing")

    @classmethod
    def constant(cls, rate):
        return cls([0], [rate])

    def lr_at(self, epoch):
        i = bisect.bisect_right(self.thresholds, epoch) - 1
        return self.rates[max(i, 0)]


def lr_at(schedule, epoch):
    return schedule.lr_at(epoch)


class Adam:
    """Bias-corrected Adam over a fixed, named parameter set."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            if p.grad.shape != p.data.shape:
                raise ContractError(f"gradient shape mismatch for {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def adam_step(state, lr=None):
    if lr is not None:
        state.lr = lr
    state.step()
