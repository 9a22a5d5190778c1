"""Block-structured convolutional backbone, linear heads, loss and optimizer."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class ConvBlock:
    """conv(k x k, stride) -> per-channel batch normalization -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 2, name: str = "block"):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, kernel // 2
        fan_in = in_ch * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)  # He-uniform for ReLU
        self.weight = param(rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)), f"{name}/conv/w")
        self.bias = param(np.zeros(out_ch), f"{name}/conv/b")
        self.gamma = param(np.ones(out_ch), f"{name}/norm/gamma")
        self.beta = param(np.zeros(out_ch), f"{name}/norm/beta")
        self.running_mean = np.zeros(out_ch)
        self.running_var = np.ones(out_ch)
        self.name = name

    def parameters(self) -> list:
        return [self.weight, self.bias, self.gamma, self.beta]

    def buffers(self) -> dict:
        return {f"{self.name}/norm/running_mean": self.running_mean,
                f"{self.name}/norm/running_var": self.running_var}

    def out_extent(self, size: int) -> int:
        return (size + 2 * self.pad - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor, train: bool = True, update_stats: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name} expects ({self.in_ch}) input channels, got shape {x.shape}")
        z = T.conv2d(x, self.weight, self.bias, self.stride, self.pad)
        c = self.out_ch
        if train:
            out, mean, var = T.batch_norm(z, self.gamma, self.beta, BN_EPS)
            if update_stats:
                count = z.shape[0] * z.shape[2] * z.shape[3]
                unbiased = var * count / max(count - 1, 1)
                self.running_mean *= 1.0 - BN_MOMENTUM
                self.running_mean += BN_MOMENTUM * mean
                self.running_var *= 1.0 - BN_MOMENTUM
                self.running_var += BN_MOMENTUM * unbiased
        else:
            rm = self.running_mean.reshape(1, c, 1, 1)
            rs = np.sqrt(self.running_var + BN_EPS).reshape(1, c, 1, 1)
            out = (z - rm) / rs * T.reshape(self.gamma, (1, c, 1, 1)) + T.reshape(self.beta, (1, c, 1, 1))
        return T.relu(out)


def gap(f: Tensor) -> Tensor:
    """Global average pooling (N, C, H, W) -> (N, C)."""
    return f.mean(axes=(2, 3))


# called after a block; may return a restyled map
BlockHook = Callable[[int, Tensor], Tensor]


class Backbone:
    """Ordered conv blocks followed by global average pooling.

    Block indices are 1-based, matching insertion positions.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128), in_ch: int = 3,
                 seed: int | np.random.Generator = 0, kernel: int = 3, stride: int = 2):
        if len(channels) < 2:
            raise ValueError("backbone needs at least two blocks")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.channels = tuple(int(c) for c in channels)
        self.in_ch = in_ch
        self.blocks = []
        prev = in_ch
        for i, c in enumerate(self.channels, start=1):
            self.blocks.append(ConvBlock(prev, c, rng, kernel, stride, name=f"backbone/block{i}"))
            prev = c

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def _check_index(self, i: int, lo: int) -> None:
        if not lo <= i <= self.num_blocks:
            raise IndexError(f"block index {i} outside [{lo}, {self.num_blocks}]")

    def forward_to(self, x: Tensor, i: int, train: bool = True, update_stats: bool = False,
                   hook: BlockHook | None = None) -> Tensor:
        """Activations after block ``i``; ``hook`` runs after each block before ``i``."""
        self._check_index(i, 1)
        out = x
        for j in range(1, i + 1):
            out = self.blocks[j - 1](out, train, update_stats)
            if hook is not None and j < i:
                out = hook(j, out)
        return out

    def forward_rest(self, f: Tensor, i: int, train: bool = True, update_stats: bool = False,
                     hook: BlockHook | None = None) -> Tensor:
        """Blocks after ``i`` then GAP; ``hook`` runs after each of those blocks."""
        self._check_index(i, 0)
        if i < self.num_blocks and f.shape[1] != self.blocks[i].in_ch:
            raise ShapeError(f"feature map {f.shape} does not fit the input of block {i + 1}")
        if i == self.num_blocks and f.shape[1] != self.channels[-1]:
            raise ShapeError(f"feature map {f.shape} is not a block-{i} output")
        out = f
        for j in range(i + 1, self.num_blocks + 1):
            out = self.blocks[j - 1](out, train, update_stats)
            if hook is not None:
                out = hook(j, out)
        return gap(out)

    def features(self, x: Tensor, train: bool = True, update_stats: bool = False) -> Tensor:
        return self.forward_rest(x, 0, train, update_stats)

    def block_outputs(self, x: Tensor, train: bool = False, hook: BlockHook | None = None) -> list:
        """Output of every block; with ``hook`` each entry is the hooked output."""
        outs, out = [], x
        for j, blk in enumerate(self.blocks, start=1):
            out = blk(out, train)
            if hook is not None:
                out = hook(j, out)
            outs.append(out)
        return outs

    def parameters(self) -> list:
        return [p for b in self.blocks for p in b.parameters()]

    def buffers(self) -> dict:
        out = {}
        for b in self.blocks:
            out.update(b.buffers())
        return out


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear"):
        bound = np.sqrt(1.0 / in_dim)
        self.weight = param(rng.uniform(-bound, bound, (out_dim, in_dim)), f"{name}/w")
        self.bias = param(np.zeros(out_dim), f"{name}/b")
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"linear layer expects (N, {self.in_dim}), got {x.shape}")
        return x @ T.transpose(self.weight) + self.bias

    def parameters(self) -> list:
        return [self.weight, self.bias]


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, k)
    if labels.size != n:
        raise ShapeError(f"{labels.size} labels for {n} rows of logits")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = -1.0 / n
    return (T.log_softmax(logits) * onehot).sum()


class SGD:
    """SGD with momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
