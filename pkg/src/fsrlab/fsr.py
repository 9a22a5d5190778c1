"""Feature-based style randomization.

An encoder lifts the per-channel style statistics of a feature map into a
hidden space, where they are mixed with Gaussian noise; a decoder maps the
mixed embeddings back to channel statistics, which then restyle the map
through AdaIN. One parameter set per source domain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import param
from .style import DEFAULT_EPS, adain, channel_stats
from .tensor import ShapeError, Tensor

ABLATIONS = ("no-noise", "no-encdec")


@dataclass(frozen=True)
class AlphaDist:
    """Distribution of the per-sample mixing weight: uniform(0, 1) or Beta(v, v)."""

    kind: str = "uniform"
    concentration: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise ValueError(f"unknown alpha distribution {self.kind!r}")
        if self.kind == "beta" and not self.concentration > 0:
            raise ValueError("beta concentration must be > 0")

    @classmethod
    def parse(cls, text: str) -> "AlphaDist":
        text = text.strip()
        if text == "uniform":
            return cls()
        if text.startswith("beta:"):
            return cls("beta", float(text[5:]))
        raise ValueError(f"alpha distribution must be 'uniform' or 'beta:<v>', got {text!r}")

    def __str__(self) -> str:
        return "uniform" if self.kind == "uniform" else f"beta:{self.concentration:g}"

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(0.0, 1.0, n)
        return rng.beta(self.concentration, self.concentration, n)


@dataclass
class NoiseDraw:
    n_mu: np.ndarray  # (N, D)
    n_sigma: np.ndarray  # (N, D)
    alpha: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.alpha.shape[0]

    def rows(self, index) -> "NoiseDraw":
        return NoiseDraw(self.n_mu[index], self.n_sigma[index], self.alpha[index])

    def with_alpha(self, value: float) -> "NoiseDraw":
        return NoiseDraw(self.n_mu, self.n_sigma, np.full_like(self.alpha, value))


def sample_noise(n: int, dim: int, alpha_dist: AlphaDist | str, rng: np.random.Generator) -> NoiseDraw:
    if isinstance(alpha_dist, str):
        alpha_dist = AlphaDist.parse(alpha_dist)
    n_mu = rng.standard_normal((n, dim))
    n_sigma = rng.standard_normal((n, dim))
    return NoiseDraw(n_mu, n_sigma, alpha_dist.sample(rng, n))


class FsrParams:
    """Encoder (C -> D) and decoder (D -> C) of one domain's randomizer."""

    def __init__(self, channels: int, hidden: int | None = None,
                 rng: np.random.Generator | None = None, name: str = "fsr"):
        hidden = channels if hidden is None else hidden
        if hidden < 1 or channels < 1:
            raise ValueError("channel and hidden widths must be positive")
        rng = rng if rng is not None else np.random.default_rng()
        self.channels, self.hidden, self.name = channels, hidden, name
        ba, bb = np.sqrt(1.0 / channels), np.sqrt(1.0 / hidden)
        self.enc_w = param(rng.uniform(-ba, ba, (hidden, channels)), f"{name}/theta_a/w")
        self.enc_b = param(np.zeros(hidden), f"{name}/theta_a/b")
        self.dec_w = param(rng.uniform(-bb, bb, (channels, hidden)), f"{name}/theta_b/w")
        self.dec_b = param(np.zeros(channels), f"{name}/theta_b/b")

    def parameters(self) -> list:
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    def encode(self, s: Tensor) -> Tensor:
        return T.relu(s @ T.transpose(self.enc_w) + self.enc_b)

    def decode(self, e: Tensor) -> Tensor:
        return T.relu(e @ T.transpose(self.dec_w) + self.dec_b)

    def check(self) -> None:
        for p in self.parameters():
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite values in {p.name}")


def _check_input(f: Tensor, channels: int, draw: NoiseDraw, dim: int) -> None:
    if f.ndim != 4 or f.shape[1] != channels:
        raise ShapeError(f"randomizer built for {channels} channels got feature map {f.shape}")
    if draw.n_mu.shape != (f.shape[0], dim) or draw.n_sigma.shape != (f.shape[0], dim):
        raise ShapeError(f"noise of shape {draw.n_mu.shape} does not match batch {f.shape[0]} x {dim}")


def _targets(st, params: FsrParams, draw: NoiseDraw):
    a = draw.alpha.reshape(-1, 1)
    e_mu = params.encode(st.mu) * a + draw.n_mu * (1.0 - a)
    e_sigma = params.encode(st.sigma) * a + draw.n_sigma * (1.0 - a)
    return params.decode(e_mu), params.decode(e_sigma)


def restyle_targets(f: Tensor, params: FsrParams, draw: NoiseDraw, eps: float = DEFAULT_EPS):
    """Decoded (mu, sigma) targets for ``f`` under ``draw``."""
    _check_input(f, params.channels, draw, params.hidden)
    params.check()
    return _targets(channel_stats(f, eps), params, draw)


def fsr_forward(f: Tensor, params: FsrParams, draw: NoiseDraw, eps: float = DEFAULT_EPS) -> Tensor:
    """Restyle ``f`` with noise-mixed, decoded statistics; shape is preserved."""
    _check_input(f, params.channels, draw, params.hidden)
    params.check()
    st = channel_stats(f, eps)
    mu_new, sigma_new = _targets(st, params, draw)
    n, c = f.shape[:2]
    content = (f - T.reshape(st.mu, (n, c, 1, 1))) / T.reshape(st.sigma, (n, c, 1, 1))
    return T.reshape(sigma_new, (n, c, 1, 1)) * content + T.reshape(mu_new, (n, c, 1, 1))


def fsr_forward_ablated(f: Tensor, mode: str, draw: NoiseDraw, params: FsrParams | None = None,
                        eps: float = DEFAULT_EPS) -> Tensor:
    """Ablated randomizer.

    ``no-noise`` runs the encoder/decoder with alpha fixed at 1. ``no-encdec``
    adds the (C-wide) noise straight to the statistics and clamps sigma at 0.
    """
    if mode == "no-noise":
        if params is None:
            raise ValueError("no-noise ablation needs encoder/decoder parameters")
        return fsr_forward(f, params, draw.with_alpha(1.0), eps)
    if mode == "no-encdec":
        if f.ndim != 4:
            raise ShapeError(f"expected an (N, C, H, W) feature map, got shape {f.shape}")
        _check_input(f, f.shape[1], draw, f.shape[1])
        st = channel_stats(f, eps)
        return adain(f, st.mu + draw.n_mu, T.relu(st.sigma + draw.n_sigma), eps)
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")


class FsrBank:
    """Domain id -> randomizer for one insertion block.

    In shared mode a single parameter set serves every domain.
    """

    def __init__(self, domains, channels: int, rng: np.random.Generator, hidden: int | None = None,
                 shared: bool = False, mode: str | None = None, block: int = 0):
        self.domains = tuple(int(d) for d in domains)
        self.channels = channels
        self.hidden = channels if hidden is None else hidden
        self.shared = shared
        self.mode = mode
        self.block = block
        if mode is not None and mode not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {mode!r}")
        keys = ("shared",) if shared else self.domains
        self.params: dict = {}
        if mode != "no-encdec":
            for key in keys:
                self.params[key] = FsrParams(channels, self.hidden, rng, name=f"fsr/{key}")

    def __len__(self) -> int:
        return len(self.params)

    def for_domain(self, d: int) -> FsrParams | None:
        if self.mode == "no-encdec":
            return None
        key = "shared" if self.shared else int(d)
        try:
            return self.params[key]
        except KeyError:
            raise KeyError(f"no randomizer for domain {d}") from None

    def parameters(self) -> list:
        return [p for fp in self.params.values() for p in fp.parameters()]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def noise_dim(self) -> int:
        return self.channels if self.mode == "no-encdec" else self.hidden

    def draw(self, n: int, alpha_dist: AlphaDist, rng: np.random.Generator) -> NoiseDraw:
        return sample_noise(n, self.noise_dim(), alpha_dist, rng)

    def __call__(self, f: Tensor, domains, draw: NoiseDraw, eps: float = DEFAULT_EPS) -> Tensor:
        """Restyle every row of ``f`` with its own domain's randomizer."""
        domains = np.asarray(domains)
        if domains.shape != (f.shape[0],):
            raise ShapeError(f"{domains.shape} domain labels for batch of {f.shape[0]}")
        for d in np.unique(domains):
            self.for_domain(d)
        if self.mode == "no-encdec":
            return fsr_forward_ablated(f, "no-encdec", draw, eps=eps)
        if self.shared:
            return self._apply(f, self.params["shared"], draw, eps)
        groups = [np.flatnonzero(domains == d) for d in np.unique(domains)]
        if len(groups) == 1:
            return self._apply(f, self.for_domain(domains[0]), draw, eps)
        pieces = []
        for rows in groups:
            sub = T.take(f, rows)
            pieces.append(self._apply(sub, self.for_domain(domains[rows[0]]), draw.rows(rows), eps))
        order = np.concatenate(groups)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return T.take(T.concat(pieces), inverse)

    def _apply(self, f, params, draw, eps):
        if self.mode == "no-noise":
            return fsr_forward_ablated(f, "no-noise", draw, params, eps)
        return fsr_forward(f, params, draw, eps)
