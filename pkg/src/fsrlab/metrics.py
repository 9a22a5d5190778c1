"""Accuracy, inter-domain discrepancy and reference feature augmentations."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .style import DEFAULT_EPS, adain, channel_stats
from .tensor import Tensor, no_grad


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict = field(default_factory=dict)
    count: int = 0


def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions with normalization running statistics (eval mode)."""
    out = []
    with no_grad():
        for s in range(0, x.shape[0], batch_size):
            logits = model.classifier(model.backbone.features(Tensor(x[s:s + batch_size]), train=False))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, split, batch_size: int = 256) -> EvalResult:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict(model, split.x, batch_size)
    hit = pred == split.y
    per_class = {int(c): float(hit[split.y == c].mean()) for c in np.unique(split.y)}
    return EvalResult(float(hit.mean()), per_class, int(hit.size))


# -- domain discrepancy ----------------------------------------------------

def domain_discrepancy(mean_maps: Sequence) -> float:
    """2/(K(K-1)) * sum over domain pairs of the L1 distance between GAP vectors.

    Each entry is a domain's mean feature map, (C, H, W), or an already
    pooled (C,) vector, or a scalar.
    """
    k = len(mean_maps)
    if k < 2:
        raise ValueError("discrepancy needs at least two domains")
    vecs = []
    for m in mean_maps:
        m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
        vecs.append(m.mean(axis=(-2, -1)) if m.ndim == 3 else np.atleast_1d(m))
    shapes = {v.shape for v in vecs}
    if len(shapes) != 1:
        raise ValueError(f"domain feature maps differ in shape: {sorted(shapes)}")
    total = 0.0
    for a in range(k):
        for b in range(a + 1, k):
            total += float(np.abs(vecs[a] - vecs[b]).sum())
    return 2.0 * total / (k * (k - 1))


@dataclass
class DiscrepancyProfile:
    values: list  # d^i for blocks 1..B
    tag: str = "baseline"
    insertion: str = ""

    def rows(self):
        return [(self.tag, i, v) for i, v in enumerate(self.values, start=1)]


def _randomizer_hook(model, domains, rng):
    from .fsr import AlphaDist

    cfg, banks = model.config, model.banks
    dist = AlphaDist.parse(cfg.alpha_dist)

    def hook(j, out):
        if j not in banks:
            return out
        bank = banks[j]
        return bank(out, domains, bank.draw(out.shape[0], dist, rng), cfg.eps)
    return hook


def domain_mean_maps(model, split, batch_size: int = 256, randomize: bool = False, seed: int = 0) -> list:
    """Per block, per domain mean feature map over ``split`` in eval mode.

    With ``randomize`` the model's randomizer banks restyle the output of the
    blocks they sit after (noise seeded by ``seed``), so a block's map is
    measured while the module is in use.
    """
    if randomize and not getattr(model, "banks", None):
        raise ValueError("randomize=True needs a model with randomizer banks")
    rng = np.random.default_rng(seed)
    domains = sorted(set(split.d.tolist()))
    nb = model.backbone.num_blocks
    sums = [{d: None for d in domains} for _ in range(nb)]
    counts = {d: int((split.d == d).sum()) for d in domains}
    with no_grad():
        for s in range(0, len(split), batch_size):
            xb, db = split.x[s:s + batch_size], split.d[s:s + batch_size]
            hook = _randomizer_hook(model, db, rng) if randomize else None
            outs = model.backbone.block_outputs(Tensor(xb), train=False, hook=hook)
            for i, o in enumerate(outs):
                for d in np.unique(db):
                    part = o.data[db == d].sum(axis=0)
                    cur = sums[i][int(d)]
                    sums[i][int(d)] = part if cur is None else cur + part
    return [[sums[i][d] / counts[d] for d in domains] for i in range(nb)]


def discrepancy_profile(model, split, tag: str = "baseline", insertion: str = "",
                        randomize: bool = False, seed: int = 0) -> DiscrepancyProfile:
    maps = domain_mean_maps(model, split, randomize=randomize, seed=seed)
    return DiscrepancyProfile([domain_discrepancy(m) for m in maps], tag, insertion)


def discrepancy_delta(run_fsr, run_baseline) -> list:
    """Per-block d_fsr - d_baseline; negative means the randomized run is less domain-specific."""
    a = run_fsr.values if isinstance(run_fsr, DiscrepancyProfile) else list(run_fsr)
    b = run_baseline.values if isinstance(run_baseline, DiscrepancyProfile) else list(run_baseline)
    if len(a) != len(b):
        raise ValueError(f"block count mismatch: {len(a)} vs {len(b)}")
    return [float(x) - float(y) for x, y in zip(a, b)]


# -- reference augmentations -------------------------------------------------

def mixstyle(f: Tensor, rng: np.random.Generator, alpha: float = 0.1, weight=None,
             eps: float = DEFAULT_EPS) -> Tensor:
    """Mix each sample's statistics with those of a shuffled batch partner.

    ``weight`` fixes the mixing coefficient of a sample's own style;
    otherwise it is drawn from Beta(alpha, alpha) per sample.
    """
    n = f.shape[0]
    if n < 2:
        raise ValueError("mixstyle needs a batch of at least two")
    st = channel_stats(f, eps)
    mu, sig = st.mu.data, st.sigma.data
    lam = rng.beta(alpha, alpha, (n, 1)) if weight is None else np.full((n, 1), float(weight))
    perm = rng.permutation(n)
    return adain(f, lam * mu + (1 - lam) * mu[perm], lam * sig + (1 - lam) * sig[perm], eps)


def padain(f: Tensor, rng: np.random.Generator, p: float = 0.01, eps: float = DEFAULT_EPS,
           perm=None) -> Tensor:
    """With probability ``p`` swap in the statistics of a permuted batch partner."""
    n = f.shape[0]
    if n < 2:
        raise ValueError("padain needs a batch of at least two")
    if rng.uniform() >= p:
        return f
    perm = rng.permutation(n) if perm is None else np.asarray(perm)
    st = channel_stats(f, eps)
    return adain(f, st.mu.data[perm], st.sigma.data[perm], eps)


def baseline_augment(f: Tensor, mode: str, rng: np.random.Generator, **kw) -> Tensor:
    if mode == "mixstyle":
        return mixstyle(f, rng, **kw)
    if mode == "padain":
        return padain(f, rng, **kw)
    raise ValueError(f"unknown augmentation {mode!r}")


# -- CSV emitters ------------------------------------------------------------

LOG_FIELDS = ("step", "stage", "block", "L_d", "L_con", "L_div", "L_cls", "lr")


def fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_discrepancy(path, profiles: Sequence[DiscrepancyProfile]) -> None:
    write_csv(path, ("run", "block", "d_i"), [r for p in profiles for r in p.rows()])


def write_series(path, xs, ys, x_name: str = "x", y_name: str = "y") -> None:
    """(x, y) plot data for external tools."""
    write_csv(path, (x_name, y_name), zip(xs, ys))
