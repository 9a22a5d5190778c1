"""Gradient-check suite over every differentiable op and the training losses."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .fsr import FsrParams, fsr_forward, fsr_forward_ablated, sample_noise
from .gradcheck import GradcheckReport, gradcheck
from .nn import SGD, cross_entropy
from .style import adain, channel_stats, instance_norm
from .tensor import Tensor, no_grad


@dataclass
class Case:
    name: str
    build: Callable  # rng -> (loss fn, params)


def _t(rng, shape, name, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, name=name)


def _weights(rng, shape):
    # a random projection turns any output into a scalar with non-trivial gradient
    return rng.standard_normal(shape)


def _unary(op, lo=-2.0, hi=2.0):
    def build(rng):
        a = _t(rng, (3, 4), "a", lo, hi)
        m = _weights(rng, (3, 4))
        return (lambda: (op(a) * m).sum()), [a]
    return build


def _binary(op, lo=-2.0, hi=2.0, shape_b=(4,)):
    def build(rng):
        a = _t(rng, (3, 4), "a")
        b = _t(rng, shape_b, "b", lo, hi)
        m = _weights(rng, (3, 4))
        return (lambda: (op(a, b) * m).sum()), [a, b]
    return build


def _reduce(kind, axes):
    def build(rng):
        a = _t(rng, (3, 4, 5), "a")
        out_shape = np.sum(np.zeros((3, 4, 5)), axis=axes).shape
        m = _weights(rng, out_shape)
        return (lambda: (T.reduce(kind, a, axes) * m).sum()), [a]
    return build


def _matmul(rng):
    a, b = _t(rng, (3, 4), "a"), _t(rng, (4, 5), "b")
    m = _weights(rng, (3, 5))
    return (lambda: (a @ b * m).sum()), [a, b]


def _shape_ops(rng):
    a = _t(rng, (2, 3, 4), "a")
    m = _weights(rng, (4, 6))
    return (lambda: (T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)) * m).sum()), [a]


def _take_concat(rng):
    a, b = _t(rng, (3, 4), "a"), _t(rng, (2, 4), "b")
    idx = np.array([4, 0, 0, 2, 1])
    m = _weights(rng, (5, 4))
    return (lambda: (T.take(T.concat([a, b]), idx) * m).sum()), [a, b]


def _log_softmax(rng):
    a = _t(rng, (3, 5), "a")
    m = _weights(rng, (3, 5))
    return (lambda: (T.log_softmax(a) * m).sum()), [a]


def _conv(rng):
    x, w, b = _t(rng, (2, 3, 7, 7), "x"), _t(rng, (4, 3, 3, 3), "w"), _t(rng, (4,), "bias")
    m = _weights(rng, (2, 4, 4, 4))
    return (lambda: (T.conv2d(x, w, b, stride=2, pad=1) * m).sum()), [x, w, b]


def _batch_norm(rng):
    z, g, b = _t(rng, (3, 4, 5, 5), "z"), _t(rng, (4,), "gamma"), _t(rng, (4,), "beta")
    m = _weights(rng, (3, 4, 5, 5))
    return (lambda: (T.batch_norm(z, g, b)[0] * m).sum()), [z, g, b]


def _cross_entropy(rng):
    a = _t(rng, (6, 5), "logits")
    y = rng.integers(0, 5, 6)
    return (lambda: cross_entropy(a, y)), [a]


def _stats(rng):
    f = _t(rng, (2, 3, 4, 4), "f")
    m1, m2 = _weights(rng, (2, 3)), _weights(rng, (2, 3))

    def fn():
        st = channel_stats(f)
        return (st.mu * m1).sum() + (st.sigma * m2).sum()
    return fn, [f]


def _instance_norm(rng):
    f, g, b = _t(rng, (2, 3, 4, 4), "f"), _t(rng, (3,), "gamma"), _t(rng, (3,), "beta")
    m = _weights(rng, (2, 3, 4, 4))
    return (lambda: (instance_norm(f, g, b) * m).sum()), [f, g, b]


def _adain(rng):
    f = _t(rng, (2, 3, 4, 4), "f")
    mu, sig = _t(rng, (2, 3), "s_mu"), _t(rng, (2, 3), "s_sigma", 0.5, 2.0)
    m = _weights(rng, (2, 3, 4, 4))
    return (lambda: (adain(f, mu, sig) * m).sum()), [f, mu, sig]


def _fsr(rng):
    f = _t(rng, (3, 4, 5, 5), "f")
    fp = FsrParams(4, 6, rng, name="fsr/0")
    # keep decoder pre-activations away from the ReLU kink
    fp.dec_b.data += 1.0
    draw = sample_noise(3, 6, "uniform", rng)
    m = _weights(rng, (3, 4, 5, 5))
    return (lambda: (fsr_forward(f, fp, draw) * m).sum()), [f] + fp.parameters()


def _fsr_encdec_ablated(rng):
    f = _t(rng, (3, 4, 5, 5), "f")
    draw = sample_noise(3, 4, "uniform", rng)
    draw.n_sigma[...] = np.abs(draw.n_sigma) + 0.5
    m = _weights(rng, (3, 4, 5, 5))
    return (lambda: (fsr_forward_ablated(f, "no-encdec", draw) * m).sum()), [f]


def _toy_state(rng, lam=1.0):
    """A tiny model mid-stage-2 with banks at block 2 and a fixed batch."""
    from .training import Batch, FsrModel, StageState, TrainConfig

    cfg = TrainConfig(channels=(4, 5, 6, 6), lam=lam, seed=int(rng.integers(1 << 30)))
    model = FsrModel(3, (0, 1), cfg)
    model.build_banks((2,))
    for bank in model.banks.values():
        for p in bank.parameters():
            if p.name.endswith("theta_b/b"):
                p.data += 1.0
    opt = SGD([], 0.0)
    state = StageState(stage=2, positions=(2,), model=model, opt_backbone=opt, opt_classifier=opt,
                       opt_discriminator=opt, opt_fsr=opt, noise_rng=np.random.default_rng(0))
    n = 6
    x = rng.uniform(0, 1, (n, 3, 16, 16))
    d = np.array([0, 1] * (n // 2))
    batch = Batch(x, rng.integers(0, 3, n), d, d)
    return state, batch


def _frozen_noise(state, fn):
    def wrapped():
        state.noise_rng = np.random.default_rng(11)
        return fn()
    return wrapped


def _loss_d(rng):
    from .training import loss_domain
    state, batch = _toy_state(rng)
    return (lambda: loss_domain(state, batch)), state.model.discriminator.parameters()


def _loss_fsr(rng):
    from .training import loss_fsr
    state, batch = _toy_state(rng)
    with no_grad():
        f = state.model.backbone.forward_to(Tensor(batch.x), 2, train=True)
    return _frozen_noise(state, lambda: loss_fsr(state, batch, f)[0]), state.model.fsr_parameters()


def _loss_cls(rng):
    from .training import loss_cls
    state, batch = _toy_state(rng)
    return _frozen_noise(state, lambda: loss_cls(state, batch)[0]), state.model.net_parameters()


SUITE = [
    Case("add", _binary(T.add)),
    Case("sub", _binary(T.sub)),
    Case("mul", _binary(T.mul)),
    Case("div", _binary(T.div, 0.5, 2.0)),
    Case("neg", _unary(T.neg)),
    Case("scale", _unary(lambda a: T.scale(a, -1.7))),
    Case("relu", _unary(T.relu)),
    Case("exp", _unary(T.exp)),
    Case("log", _unary(T.log, 0.2, 3.0)),
    Case("sqrt", _unary(T.sqrt, 0.2, 3.0)),
    Case("matmul", _matmul),
    Case("sum", _reduce("sum", (0, 2))),
    Case("mean", _reduce("mean", (1,))),
    Case("max", _reduce("max", (2,))),
    Case("reshape+transpose", _shape_ops),
    Case("take+concat", _take_concat),
    Case("log_softmax", _log_softmax),
    Case("cross_entropy", _cross_entropy),
    Case("conv2d", _conv),
    Case("batch_norm", _batch_norm),
    Case("channel_stats", _stats),
    Case("instance_norm", _instance_norm),
    Case("adain", _adain),
    Case("fsr_forward", _fsr),
    Case("fsr_no_encdec", _fsr_encdec_ablated),
    Case("L_d", _loss_d),
    Case("L_fsr", _loss_fsr),
    Case("L_cls", _loss_cls),
]


@dataclass
class SuiteResult:
    name: str
    report: GradcheckReport
    seconds: float


def run_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-4, max_checks: int | None = 40,
              only=None) -> list:
    out = []
    for i, case in enumerate(SUITE):
        if only is not None and case.name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        fn, params = case.build(rng)
        rep = gradcheck(fn, params, step=step, tol=tol, max_checks=max_checks, seed=seed)
        out.append(SuiteResult(case.name, rep, time.perf_counter() - t0))
    return out
