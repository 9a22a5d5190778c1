"""Channel statistics, instance normalization and AdaIN on NCHW feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_EPS = 1e-6


@dataclass
class StyleStats:
    mu: Tensor  # (N, C)
    sigma: Tensor  # (N, C)
    eps: float = DEFAULT_EPS


def _check_map(f: Tensor) -> None:
    if f.ndim != 4:
        raise ShapeError(f"expected an (N, C, H, W) feature map, got shape {f.shape}")
    if f.shape[2] * f.shape[3] < 1:
        raise ShapeError("feature map has an empty spatial extent")


def channel_stats(f: Tensor, eps: float = DEFAULT_EPS) -> StyleStats:
    """Per-sample, per-channel spatial mean and sqrt(variance + eps)."""
    _check_map(f)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mu = f.mean(axes=(2, 3))
    centered = f - T.reshape(mu, mu.shape + (1, 1))
    var = (centered * centered).mean(axes=(2, 3))
    return StyleStats(mu, T.sqrt(var + eps), eps)


def _expand(s: Tensor, f: Tensor, what: str) -> Tensor:
    """Broadcast a (C,) or (N, C) style target over an NCHW map."""
    n, c = f.shape[:2]
    if s.shape == (c,):
        return T.reshape(s, (1, c, 1, 1))
    if s.shape == (n, c):
        return T.reshape(s, (n, c, 1, 1))
    raise ShapeError(f"{what} of shape {s.shape} does not match feature map {f.shape}")


def normalized_content(f: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """(f - f_mu) / f_sigma, the style-free part of ``f``."""
    st = channel_stats(f, eps)
    return (f - _expand(st.mu, f, "mu")) / _expand(st.sigma, f, "sigma")


def instance_norm(f: Tensor, gamma, beta, eps: float = DEFAULT_EPS) -> Tensor:
    gamma, beta = T._lift(gamma), T._lift(beta)
    c = f.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    return _expand(gamma, f, "gamma") * normalized_content(f, eps) + _expand(beta, f, "beta")


def adain(f: Tensor, s_mu, s_sigma, eps: float = DEFAULT_EPS) -> Tensor:
    """Restyle ``f`` to target statistics; targets may be (C,) or (N, C)."""
    s_mu, s_sigma = T._lift(s_mu), T._lift(s_sigma)
    if np.any(s_sigma.data < 0):
        raise ValueError("adain target sigma must be non-negative")
    return _expand(s_sigma, f, "s_sigma") * normalized_content(f, eps) + _expand(s_mu, f, "s_mu")
