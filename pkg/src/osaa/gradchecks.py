"""Registry of finite-difference checks for ops, losses and the network chains.

Each entry builds a scalar function and its 64-bit inputs from a seed. The
``ops`` scope covers every differentiable operation exported by
``osaa.autodiff``; ``networks`` covers the three encoder chains; ``losses``
covers the objective terms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck, GradcheckReport
from .autodiff import ops
from .losses import classification_loss, cross_entropy, discriminator_loss, entropy_loss, reconstruction_loss
from .networks import OSAANetworks

SCOPES = ("ops", "networks", "losses")

# a builder returns (f, inputs) or (f, inputs, numeric_scale)
Builder = Callable[[np.random.Generator], tuple]


@dataclass(frozen=True)
class GradItem:
    name: str
    scope: str
    build: Builder
    max_elements: Optional[int] = None

    def run(self, seed: int, **kw) -> GradcheckReport:
        rng = np.random.default_rng(seed)
        built = self.build(rng)
        f, inputs = built[:2]
        scale = built[2] if len(built) > 2 else None
        return gradcheck(f, inputs, max_elements=self.max_elements, rng=rng, name=f"{self.name}[seed={seed}]",
                         numeric_scale=scale, **kw)


REGISTRY: dict[str, GradItem] = {}


def register(name: str, scope: str, max_elements: Optional[int] = None):
    def deco(build: Builder) -> Builder:
        if name in REGISTRY:
            raise ValueError(f"gradcheck item {name!r} registered twice")
        REGISTRY[name] = GradItem(name, scope, build, max_elements)
        return build
    return deco


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    data = rng.uniform(lo, hi, size=shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def _w(rng, *shape) -> np.ndarray:
    # fixed random weighting turns any output into a scalar with a generic gradient
    return rng.standard_normal(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


# ---------------------------------------------------------------- ops

def _binary(fn, positive_b=False):
    def build(rng):
        a = _t(rng, 3, 4)
        b = _t(rng, 4, lo=0.5, hi=2.0) if positive_b else _t(rng, 4)  # broadcast over rows
        w = _w(rng, 3, 4)
        return (lambda a, b: _weighted(fn(a, b), w)), [a, b]
    return build


register("add", "ops")(_binary(lambda a, b: a + b))
register("sub", "ops")(_binary(lambda a, b: a - b))
register("mul", "ops")(_binary(lambda a, b: a * b))
register("div", "ops")(_binary(lambda a, b: a / b, positive_b=True))


def _unary(fn, lo=None, hi=None):
    def build(rng):
        a = _t(rng, 3, 5, lo=lo, hi=hi)
        w = _w(rng, *fn(a).shape)
        return (lambda a: _weighted(fn(a), w)), [a]
    return build


register("neg", "ops")(_unary(lambda a: -a))
register("exp", "ops")(_unary(ad.exp))
register("log", "ops")(_unary(ad.log, 0.2, 3.0))
register("relu", "ops")(_unary(ad.relu))
register("sigmoid", "ops")(_unary(ad.sigmoid))
register("log_sigmoid", "ops")(_unary(ad.log_sigmoid, -8.0, 8.0))


@register("grad_reverse", "ops")
def _grad_reverse(rng):
    a = _t(rng, 3, 5)
    w = _w(rng, 3, 5)
    return (lambda a: _weighted(ad.grad_reverse(a, 0.7), w)), [a], [-0.7]

register("sum", "ops")(_unary(lambda a: ops.sum(a, axis=1) * ops.sum(a)))
register("mean", "ops")(_unary(lambda a: ops.mean(a, axis=0) * ops.mean(a)))
register("reshape", "ops")(_unary(lambda a: ad.reshape(a, (5, 3)) * ad.reshape(a, (5, 3))))
register("softmax", "ops")(_unary(lambda a: ad.softmax(a, axis=1)))
register("log_softmax", "ops")(_unary(lambda a: ad.log_softmax(a, axis=1)))
register("take_rows", "ops")(_unary(lambda a: ad.take_rows(a, np.array([4, 0, 2]))))


@register("concat", "ops")
def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 4)
    w = _w(rng, 2, 7)
    return (lambda a, b: _weighted(ad.concat([a, b], axis=1), w)), [a, b]


@register("matmul", "ops")
def _matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    w = _w(rng, 3, 2)
    return (lambda a, b: _weighted(ad.matmul(a, b), w)), [a, b]


@register("linear", "ops")
def _linear(rng):
    x, W, b = _t(rng, 4, 5), _t(rng, 3, 5), _t(rng, 3)
    w = _w(rng, 4, 3)
    return (lambda x, W, b: _weighted(ad.linear(x, W, b), w)), [x, W, b]


@register("dropout", "ops")
def _dropout(rng):
    x = _t(rng, 4, 6)
    w = _w(rng, 4, 6)
    seed = int(rng.integers(1 << 30))
    # a fresh generator per call reproduces the same mask at every evaluation
    return (lambda x: _weighted(ad.dropout(x, 0.4, np.random.default_rng(seed), training=True), w)), [x]


@register("mse_per_sample", "ops")
def _mse(rng):
    a, b = _t(rng, 3, 1, 7), _t(rng, 3, 1, 7)
    w = _w(rng, 3)
    return (lambda a, b: _weighted(ad.mse_per_sample(a, b), w)), [a, b]


def _conv_case(rng, transpose: bool):
    B, C_in, C_out = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    K = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, K))
    L = int(rng.integers(K + 2, K + 9))
    x = _t(rng, B, C_in, L)
    W = _t(rng, *((C_in, C_out, K) if transpose else (C_out, C_in, K)))
    b = _t(rng, C_out)
    fn = ad.conv_transpose1d if transpose else ad.conv1d
    w = _w(rng, *fn(x, W, b, stride=stride, padding=padding).shape)
    return (lambda x, W, b: _weighted(fn(x, W, b, stride=stride, padding=padding), w)), [x, W, b]


register("conv1d", "ops")(lambda rng: _conv_case(rng, transpose=False))
register("conv_transpose1d", "ops")(lambda rng: _conv_case(rng, transpose=True))


@register("maxpool1d", "ops")
def _maxpool(rng):
    window = int(rng.integers(2, 4))
    x = _t(rng, 2, 3, int(rng.integers(window, 13)))
    w = _w(rng, *ad.maxpool1d(x, window)[0].shape)
    return (lambda x: _weighted(ad.maxpool1d(x, window)[0], w)), [x]


@register("maxunpool1d", "ops")
def _maxunpool(rng):
    window = int(rng.integers(2, 4))
    L = int(rng.integers(window, 13))
    _, idx = ad.maxpool1d(Tensor(rng.standard_normal((2, 3, L))), window)
    x = _t(rng, *idx.index.shape)
    w = _w(rng, 2, 3, L)
    return (lambda x: _weighted(ad.maxunpool1d(x, idx), w)), [x]


@register("adaptive_avg_pool1d", "ops")
def _adaptive(rng):
    L = int(rng.integers(1, 12))
    n = int(rng.integers(1, L + 1))
    x = _t(rng, 2, 3, L)
    w = _w(rng, 2, 3, n)
    return (lambda x: _weighted(ad.adaptive_avg_pool1d(x, n), w)), [x]


# ---------------------------------------------------------------- losses

@register("reconstruction_loss", "losses")
def _recon(rng):
    a, b = _t(rng, 4, 1, 9), _t(rng, 4, 1, 9)
    return (lambda a, b: reconstruction_loss(a, b)[1]), [a, b]


@register("cross_entropy", "losses")
def _ce(rng):
    logits = _t(rng, 5, 3)
    labels = rng.integers(0, 3, size=5)
    return (lambda z: cross_entropy(z, labels).sum()), [logits]


@register("entropy_loss", "losses")
def _entropy(rng):
    logits = _t(rng, 5, 4)
    return (lambda z: entropy_loss(z).sum()), [logits]


@register("classification_loss", "losses")
def _classification(rng):
    zs, zm, zt = _t(rng, 4, 3), _t(rng, 4, 3), _t(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)
    return (lambda a, b, c: classification_loss(a, labels, b, c)[1]), [zs, zm, zt]


@register("discriminator_loss", "losses")
def _disc(rng):
    ls, lt = _t(rng, 5, 1), _t(rng, 6, 1)
    return (lambda a, b: discriminator_loss(a, b)), [ls, lt]


# ---------------------------------------------------------------- network chains

_NET_LENGTH = 75  # ragged at every pooling stage: 75 -> 38 -> 19 -> 10
_GRL_COEFF = 0.5


def _small_nets(rng) -> OSAANetworks:
    nets = OSAANetworks(_NET_LENGTH, 3, channels=4, kernel=9, feature_dim=8, hidden=8,
                        seed=int(rng.integers(1 << 30)), dtype=np.float64)
    # nonzero biases so the bias gradients are generic
    for _, p in nets.named_parameters():
        if p.ndim == 1:
            p.data = 0.1 * rng.standard_normal(p.shape)
    return nets


def _reset_dropout(nets: OSAANetworks, seed: int) -> None:
    nets.encoder.dropout_rngs = [np.random.default_rng([seed, i]) for i in range(nets.encoder.n_blocks)]


def _chain(rng, module: str):
    nets = _small_nets(rng)
    x = _t(rng, 3, 1, _NET_LENGTH)
    drop_seed = int(rng.integers(1 << 30))
    labels = rng.integers(0, 3, size=3)
    names = [n for n, _ in nets.named_parameters() if n.startswith(("encoder.", f"{module}."))]
    params = nets.parameters()
    x_t = _t(rng, 3, 1, _NET_LENGTH)
    if module == "discriminator":
        # the discriminator treats class probabilities as constants, so the check
        # holds them fixed at their unperturbed values
        _reset_dropout(nets, drop_seed)
        probs = [ad.softmax(nets.classifier(nets.encoder(v)[0]), axis=1).detach() for v in (x, x_t)]

    def f(x, *_):
        _reset_dropout(nets, drop_seed)
        h, idx = nets.encoder(x)
        if module == "classifier":
            return cross_entropy(nets.classifier(h), labels).sum()
        if module == "decoder":
            return reconstruction_loss(nets.decoder(h, idx), x)[1]
        h_t, _ = nets.encoder(x_t)
        d_s = nets.discriminator(h, probs[0], _GRL_COEFF)
        d_t = nets.discriminator(h_t, probs[1], _GRL_COEFF)
        return discriminator_loss(d_s, d_t)

    inputs = [x] + [params[n] for n in names]
    if module != "discriminator":
        return f, inputs
    # everything except the discriminator's own weights sits behind the reversal layer
    scale = [1.0 if n.startswith("discriminator.") else -_GRL_COEFF for n in ["input"] + names]
    return f, inputs, scale


register("encoder->classifier->cross_entropy", "networks", max_elements=12)(lambda rng: _chain(rng, "classifier"))
register("encoder->decoder->reconstruction", "networks", max_elements=12)(lambda rng: _chain(rng, "decoder"))
register("encoder->discriminator->disc_loss", "networks", max_elements=12)(
    lambda rng: _chain(rng, "discriminator"))


# ---------------------------------------------------------------- negative control

def _broken_sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    # wrong on purpose: drops the (1 - s) factor
    return Tensor.from_op(s, (a,), lambda g: (g * s,), "broken_sigmoid")


NEGATIVE_CONTROL = GradItem("broken_sigmoid", "ops", _unary(_broken_sigmoid))


def items(scope: Optional[str] = None, names: Optional[Iterable[str]] = None) -> list[GradItem]:
    if scope is not None and scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {list(SCOPES)}")
    chosen = [it for it in REGISTRY.values() if scope is None or it.scope == scope]
    if names is not None:
        wanted = set(names)
        unknown = wanted - set(REGISTRY)
        if unknown:
            raise ValueError(f"unknown gradcheck items {sorted(unknown)}")
        chosen = [it for it in chosen if it.name in wanted]
    return chosen


def run_suite(selected: Iterable[GradItem], seeds: Iterable[int] = range(10), **kw) -> list[GradcheckReport]:
    return [item.run(seed, **kw) for item in selected for seed in seeds]
