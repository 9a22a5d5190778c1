"""Synthetic multi-domain shape images.

Content is a class-specific shape at a random position and area; style is a
per-domain color transform, background level and additive texture. Shape
areas are drawn independently of the class so that image brightness carries
no label information.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint

SIZE = 32
SUPERSAMPLE = 4
AREA_RANGE = (90.0, 200.0)  # foreground pixels at 32x32

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "frame", "xcross")
# area of each shape as a multiple of r**2, r = half extent
_AREA_COEF = {
    "disk": np.pi,
    "square": 4.0,
    "triangle": 2.0,
    "cross": 20.0 / 9.0,
    "ring": np.pi * (1.0 - 0.55 ** 2),
    "diamond": 2.0,
    "frame": 4.0 * (1.0 - 0.6 ** 2),
    "xcross": 20.0 / 9.0,
}
TEXTURES = ("none", "stripes", "speckle")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str = ""
    gains: tuple = (1.0, 1.0, 1.0)
    offsets: tuple = (0.0, 0.0, 0.0)
    texture: str = "none"
    texture_amp: float = 0.0
    background: float = 0.2

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if len(self.gains) != 3 or len(self.offsets) != 3:
            raise ValueError("gains and offsets need one value per RGB channel")


def default_domains() -> list:
    """Four PACS-shaped domains with distinct palettes and textures."""
    return [
        DomainSpec(0, "photo", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "none", 0.0, 0.25),
        DomainSpec(1, "art", (0.8, 0.55, 0.3), (0.15, 0.2, 0.3), "stripes", 0.12, 0.35),
        DomainSpec(2, "cartoon", (0.3, 0.9, 0.75), (0.25, 0.0, 0.1), "none", 0.0, 0.1),
        DomainSpec(3, "sketch", (-0.7, -0.7, -0.6), (0.85, 0.85, 0.8), "speckle", 0.15, 0.05),
    ]


@dataclass
class Sample:
    image: np.ndarray  # (3, 32, 32) in [0, 1]
    y: int
    d: int
    sid: str = ""


@dataclass
class Split:
    x: np.ndarray  # (N, 3, 32, 32)
    y: np.ndarray
    d: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @classmethod
    def from_samples(cls, samples) -> "Split":
        if not samples:
            return cls(np.zeros((0, 3, SIZE, SIZE)), np.zeros(0, np.int64), np.zeros(0, np.int64), [])
        return cls(np.stack([s.image for s in samples]),
                   np.array([s.y for s in samples], dtype=np.int64),
                   np.array([s.d for s in samples], dtype=np.int64),
                   [s.sid for s in samples])

    def subset(self, index) -> "Split":
        index = np.asarray(index, dtype=np.int64)
        return Split(self.x[index], self.y[index], self.d[index], [self.ids[i] for i in index])

    def domain(self, d: int) -> "Split":
        return self.subset(np.flatnonzero(self.d == d))


def shape_mask(kind: str, r: float, cx: float, cy: float, size: int = SIZE, ss: int = SUPERSAMPLE) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1] of shape ``kind`` centred at (cx, cy)."""
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    yy, xx = np.meshgrid(coords - cy, coords - cx, indexing="ij")
    ax, ay = np.abs(xx), np.abs(yy)
    if kind == "disk":
        m = xx ** 2 + yy ** 2 <= r ** 2
    elif kind == "square":
        m = (ax <= r) & (ay <= r)
    elif kind == "triangle":
        # apex at top, base at bottom, height 2r
        m = (yy >= -r) & (yy <= r) & (ax <= (yy + r) / 2.0)
    elif kind == "cross":
        w = r / 3.0
        m = ((ax <= w) & (ay <= r)) | ((ay <= w) & (ax <= r))
    elif kind == "ring":
        d2 = xx ** 2 + yy ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif kind == "diamond":
        m = ax + ay <= r
    elif kind == "frame":
        m = (ax <= r) & (ay <= r) & ~((ax <= 0.6 * r) & (ay <= 0.6 * r))
    elif kind == "xcross":
        u, v = (xx + yy) / np.sqrt(2.0), (xx - yy) / np.sqrt(2.0)
        au, av = np.abs(u), np.abs(v)
        w = r / 3.0
        m = ((au <= w) & (av <= r)) | ((av <= w) & (au <= r))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _texture(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.texture == "none" or spec.texture_amp == 0.0:
        return np.zeros((SIZE, SIZE))
    if spec.texture == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        xs = np.arange(SIZE)
        return spec.texture_amp * np.sin(2 * np.pi * xs / 4.0 + phase)[None, :].repeat(SIZE, 0)
    return spec.texture_amp * rng.standard_normal((SIZE, SIZE))


def render(spec: DomainSpec, kind: str, area: float, cx: float, cy: float, fg: float,
           style_rng: np.random.Generator) -> np.ndarray:
    r = np.sqrt(area / _AREA_COEF[kind])
    mask = shape_mask(kind, r, cx, cy)
    base = spec.background + (fg - spec.background) * mask + _texture(spec, style_rng)
    img = np.asarray(spec.gains)[:, None, None] * base[None] + np.asarray(spec.offsets)[:, None, None]
    img = img + 0.02 * style_rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: DomainSpec, class_count: int, n_per_class: int, seed: int) -> list:
    """Deterministic samples of one domain, class-major order.

    Content draws depend only on (seed, domain id), so two specs that share an
    id and differ in style produce identical shape masks.
    """
    if class_count < 2:
        raise ValueError("need at least two classes")
    if class_count > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} classes are supported, got {class_count}")
    content_rng = np.random.default_rng([seed, spec.domain_id, 0])
    style_rng = np.random.default_rng([seed, spec.domain_id, 1])
    out = []
    for y in range(class_count):
        for i in range(n_per_class):
            area = content_rng.uniform(*AREA_RANGE)
            cx, cy = content_rng.uniform(12.0, 20.0, 2)
            fg = content_rng.uniform(0.75, 1.0)
            img = render(spec, SHAPES[y], area, cx, cy, fg, style_rng)
            out.append(Sample(img, y, spec.domain_id, f"d{spec.domain_id}_c{y}_{i:05d}"))
    return out


def split_indices(labels: np.ndarray, val_fraction: float, rng: np.random.Generator):
    """Per-class shuffled split; each class contributes round(n * val_fraction) to val."""
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        nv = int(round(idx.size * val_fraction))
        val.extend(idx[:nv])
        train.extend(idx[nv:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def domain_splits(spec: DomainSpec, class_count: int, n_per_domain: int,
                  val_fraction: float = 0.1, seed: int = 0):
    """Stratified (train, val) split of one domain's samples."""
    if n_per_domain % class_count:
        raise ValueError("n_per_domain must be a multiple of class_count")
    samples = generate(spec, class_count, n_per_domain // class_count, seed)
    labels = np.array([s.y for s in samples])
    tr, va = split_indices(labels, val_fraction, np.random.default_rng([seed, spec.domain_id, 2]))
    return [samples[i] for i in tr], [samples[i] for i in va]


def _nonempty(splits: dict) -> dict:
    for name, split in splits.items():
        if len(split) == 0:
            raise ValueError(f"{name} split is empty")
    return splits


def make_benchmark(sources, target: DomainSpec, class_count: int = 7, n_per_domain: int = 700,
                   val_fraction: float = 0.1, seed: int = 0) -> dict:
    """Sources split stratified into train/val; the whole target domain becomes ``test``."""
    ids = [s.domain_id for s in sources]
    if target.domain_id in ids:
        raise ValueError("target domain must be distinct from the sources")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate source domain ids")
    train, val = [], []
    for spec in sources:
        tr, va = domain_splits(spec, class_count, n_per_domain, val_fraction, seed)
        train += tr
        val += va
    tr, va = domain_splits(target, class_count, n_per_domain, val_fraction, seed)
    return _nonempty({"train": Split.from_samples(train), "val": Split.from_samples(val),
                      "test": Split.from_samples(tr + va)})


def generate_pool(specs, class_count: int = 7, n_per_domain: int = 700,
                  val_fraction: float = 0.1, seed: int = 0) -> dict:
    """Every domain split into train/val; any domain can later serve as target."""
    train, val = [], []
    for spec in specs:
        tr, va = domain_splits(spec, class_count, n_per_domain, val_fraction, seed)
        train += tr
        val += va
    return _nonempty({"train": Split.from_samples(train), "val": Split.from_samples(val)})


def select_target(pool: dict, target: int) -> dict:
    """Leave-one-domain-out view of a pool; matches ``make_benchmark`` sample for sample."""
    tr, va = pool["train"], pool["val"]
    if target not in set(tr.d.tolist()) | set(va.d.tolist()):
        raise ValueError(f"target domain {target} not in dataset")
    test = Split(np.concatenate([tr.x[tr.d == target], va.x[va.d == target]]),
                 np.concatenate([tr.y[tr.d == target], va.y[va.d == target]]),
                 np.concatenate([tr.d[tr.d == target], va.d[va.d == target]]),
                 [i for i, d in zip(tr.ids, tr.d) if d == target] + [i for i, d in zip(va.ids, va.d) if d == target])
    return _nonempty({"train": tr.subset(np.flatnonzero(tr.d != target)),
                      "val": va.subset(np.flatnonzero(va.d != target)),
                      "test": test})


# -- on-disk cache -------------------------------------------------------

MANIFEST = "manifest.csv"


def save_dataset(root, splits: dict) -> Path:
    """Write one flat binary file per image plus a ``relpath,y,d,split`` manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for name, split in splits.items():
        for i in range(len(split)):
            rel = f"images/{split.ids[i]}.bin"
            checkpoint.save(root / rel, {"image": split.x[i]})
            lines.append(f"{rel},{int(split.y[i])},{int(split.d[i])},{name}\n")
    tmp = root / (MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        fh.writelines(lines)
    os.replace(tmp, root / MANIFEST)
    return root


def load_dataset(root) -> dict:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    rows: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected relpath,y,d,split")
            rel, y, d, split = parts
            rows.setdefault(split, []).append((rel, int(y), int(d)))
    out = {}
    for split, items in rows.items():
        samples = []
        for rel, y, d in items:
            img = checkpoint.load(root / rel)["image"]
            samples.append(Sample(img, y, d, Path(rel).stem))
        out[split] = Split.from_samples(samples)
    return out
