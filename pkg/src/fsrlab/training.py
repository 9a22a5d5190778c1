"""Three-phase updates and the block-by-block insertion schedule.

Each iteration updates, in order: the domain discriminator on original
features, the randomizers on augmented features (consistency + diversity),
then the backbone and classifier on both. During training the randomizer
moves from block 1 to the last block in equal-length stages.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics
from .fsr import AlphaDist, FsrBank
from .nn import SGD, Backbone, Linear, cross_entropy
from .style import DEFAULT_EPS
from .tensor import Tensor, frozen, no_grad

log = logging.getLogger(__name__)

ABLATION_FLAGS = {
    "no-div": "disable_L_div",
    "no-con": "disable_L_con",
    "shared": "shared_fsr",
    "no-noise": "no_noise",
    "no-encdec": "no_encdec",
}


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1.0
    stages: int = 4
    iters_per_stage: int | None = None  # overrides epochs_per_stage when set
    epochs_per_stage: int = 15
    lr_backbone: float = 0.03
    lr_head: float = 0.3
    lr_fsr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    alpha_dist: str = "uniform"
    seed: int = 0
    channels: tuple = (16, 32, 64, 128)
    fsr_hidden: int | None = None
    eps: float = DEFAULT_EPS
    disable_L_div: bool = False
    disable_L_con: bool = False
    shared_fsr: bool = False
    no_noise: bool = False
    no_encdec: bool = False
    star_mode: bool = False
    fixed_block: int | None = None
    update_discriminator: bool = True
    select_best: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if self.iters_per_stage is not None and self.iters_per_stage < 1:
            raise ValueError("iterations per stage must be >= 1")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs per stage must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.star_mode and self.fixed_block is not None:
            raise ValueError("star mode and a fixed block are mutually exclusive")
        if self.no_noise and self.no_encdec:
            raise ValueError("no-noise and no-encdec ablations are mutually exclusive")
        if self.fixed_block is not None and not 1 <= self.fixed_block <= len(self.channels):
            raise ValueError(f"fixed block must lie in [1, {len(self.channels)}]")
        if self.stages > len(self.channels):
            raise ValueError(f"{self.stages} stages but only {len(self.channels)} blocks")
        AlphaDist.parse(self.alpha_dist)

    @property
    def mode(self) -> str:
        if self.star_mode:
            return "star"
        if self.fixed_block is not None:
            return "fixed"
        return "progressive"

    @property
    def fsr_mode(self) -> str | None:
        if self.no_noise:
            return "no-noise"
        if self.no_encdec:
            return "no-encdec"
        return None

    def positions(self, stage: int) -> tuple:
        """Active insertion blocks during ``stage`` (1-based)."""
        if self.star_mode:
            return tuple(range(1, len(self.channels) + 1))
        if self.fixed_block is not None:
            return (self.fixed_block,)
        return (stage,)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


class FsrModel:
    """Backbone, class head, domain head and the active randomizer banks."""

    def __init__(self, num_classes: int, domains, config: TrainConfig):
        self.config = config
        self.domains = tuple(sorted(int(d) for d in domains))
        self.domain_index = {d: i for i, d in enumerate(self.domains)}
        self.num_classes = num_classes
        rng = np.random.default_rng([config.seed, 0])
        self.backbone = Backbone(config.channels, seed=rng)
        self.classifier = Linear(self.backbone.feature_dim, num_classes, rng, "classifier")
        self.discriminator = Linear(self.backbone.feature_dim, len(self.domains), rng, "discriminator")
        self._fsr_rng = np.random.default_rng([config.seed, 3])
        self.banks: dict = {}

    def build_banks(self, positions) -> None:
        cfg = self.config
        self.banks = {
            i: FsrBank(self.domains, self.backbone.channels[i - 1], self._fsr_rng,
                       hidden=cfg.fsr_hidden, shared=cfg.shared_fsr, mode=cfg.fsr_mode, block=i)
            for i in positions
        }

    def fsr_parameters(self) -> list:
        return [p for i in sorted(self.banks) for p in self.banks[i].parameters()]

    def net_parameters(self) -> list:
        return self.backbone.parameters() + self.classifier.parameters()

    def state_dict(self) -> dict:
        """Flat name -> array map in checkpoint naming."""
        out = {p.name: p.data for p in self.net_parameters() + self.discriminator.parameters()}
        out.update(self.backbone.buffers())
        star = len(self.banks) > 1
        for i, bank in sorted(self.banks.items()):
            for p in bank.parameters():
                name = p.name.replace("fsr/", f"fsr/block{i}/", 1) if star else p.name
                out[name] = p.data
        out["meta/channels"] = np.array(self.backbone.channels, dtype=np.float64)
        out["meta/num_classes"] = np.array([self.num_classes], dtype=np.float64)
        out["meta/domains"] = np.array(self.domains, dtype=np.float64)
        return out

    def load_state(self, state: dict) -> None:
        for p in self.net_parameters() + self.discriminator.parameters():
            p.data = np.array(state[p.name], dtype=np.float64)
        for name, buf in self.backbone.buffers().items():
            buf[...] = state[name]

    @classmethod
    def from_state(cls, state: dict) -> "FsrModel":
        cfg = TrainConfig(channels=tuple(int(c) for c in state["meta/channels"]),
                          stages=1, select_best=False)
        model = cls(int(state["meta/num_classes"][0]), [int(d) for d in state["meta/domains"]], cfg)
        model.load_state(state)
        return model


def param_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray  # discriminator indices in [0, K)
    domain: np.ndarray  # raw domain ids, keys of the randomizer banks


@dataclass
class StageState:
    stage: int
    positions: tuple
    model: FsrModel
    opt_backbone: SGD
    opt_classifier: SGD
    opt_discriminator: SGD
    opt_fsr: SGD | None
    noise_rng: np.random.Generator
    step: int = 0

    @property
    def block(self) -> int:
        return self.positions[0]


def _finite(name: str, value: Tensor, state: StageState) -> float:
    v = value.item()
    if not np.isfinite(v):
        raise NumericalError(f"{name} is {v} at step {state.step} (stage {state.stage}, "
                             f"blocks {state.positions})")
    return v


def _aug_hook(state: StageState, batch: Batch, first: int):
    """Applies the banks placed after later blocks (star mode)."""
    cfg = state.model.config
    banks = state.model.banks
    dist = AlphaDist.parse(cfg.alpha_dist)
    later = [j for j in state.positions if j > first]
    if not later:
        return None

    def hook(j, out):
        if j in later:
            bank = banks[j]
            return bank(out, batch.domain, bank.draw(out.shape[0], dist, state.noise_rng), cfg.eps)
        return out

    return hook


def augmented_features(state: StageState, batch: Batch, f: Tensor) -> Tensor:
    """Pooled features of the randomized path starting from block-``first`` activations ``f``."""
    model, cfg = state.model, state.model.config
    first = state.positions[0]
    bank = model.banks[first]
    draw = bank.draw(f.shape[0], AlphaDist.parse(cfg.alpha_dist), state.noise_rng)
    g = bank(f, batch.domain, draw, cfg.eps)
    return model.backbone.forward_rest(g, first, train=True, hook=_aug_hook(state, batch, first))


def loss_domain(state: StageState, batch: Batch, f: Tensor | None = None) -> Tensor:
    """Discriminator cross-entropy on original features; only the discriminator is differentiable."""
    model = state.model
    first = state.positions[0]
    with no_grad():
        if f is None:
            f = model.backbone.forward_to(Tensor(batch.x), first, train=True)
        pooled = model.backbone.forward_rest(f, first, train=True)
    return cross_entropy(model.discriminator(pooled), batch.d)


def loss_fsr(state: StageState, batch: Batch, f: Tensor) -> tuple:
    """(L_fsr, L_con, L_div) on augmented features; gradients reach only the randomizers."""
    model, cfg = state.model, state.model.config
    with frozen(model.net_parameters() + model.discriminator.parameters()):
        pooled = augmented_features(state, batch, f)
        l_con = cross_entropy(model.classifier(pooled), batch.y)
        l_div = -cross_entropy(model.discriminator(pooled), batch.d)
    if cfg.disable_L_div and cfg.disable_L_con:
        total = None
    elif cfg.disable_L_div:
        total = l_con
    elif cfg.disable_L_con:
        total = l_div
    else:
        total = l_con + l_div
    return total, l_con, l_div


def loss_cls(state: StageState, batch: Batch, lam: float | None = None) -> tuple:
    """(L_cls, plain CE) for the backbone and classifier; randomizers are frozen.

    Gradients flow through the randomized path into the blocks before the
    insertion point. At lam == 0 the augmented term is not computed.
    """
    model = state.model
    lam = model.config.lam if lam is None else lam
    first = state.positions[0]
    f = model.backbone.forward_to(Tensor(batch.x), first, train=True, update_stats=True)
    pooled = model.backbone.forward_rest(f, first, train=True, update_stats=True)
    plain = cross_entropy(model.classifier(pooled), batch.y)
    if lam == 0:
        return plain, plain
    with frozen(model.fsr_parameters()):
        aug = augmented_features(state, batch, f)
    return plain + lam * cross_entropy(model.classifier(aug), batch.y), plain


def train_step(state: StageState, batch: Batch) -> dict:
    """One iteration: discriminator, randomizers, then backbone + classifier."""
    model, cfg = state.model, state.model.config
    state.step += 1
    first = state.positions[0]

    # phase 1: F_d
    with no_grad():
        f = model.backbone.forward_to(Tensor(batch.x), first, train=True)
    state.opt_discriminator.zero_grad()
    if cfg.update_discriminator:
        l_d = loss_domain(state, batch, f)
        l_d_val = _finite("L_d", l_d, state)
        l_d.backward()
        state.opt_discriminator.step()
    else:
        with no_grad():
            l_d_val = _finite("L_d", loss_domain(state, batch, f), state)

    # phase 2: randomizers. Block-i activations are unchanged by phase 1.
    trainable = state.opt_fsr is not None and bool(state.opt_fsr.params)
    if trainable:
        state.opt_fsr.zero_grad()
        total, l_con, l_div = loss_fsr(state, batch, f)
        l_con_val, l_div_val = _finite("L_con", l_con, state), _finite("L_div", l_div, state)
        if total is not None:
            total.backward()
            state.opt_fsr.step()
    else:
        with no_grad():
            _, l_con, l_div = loss_fsr(state, batch, f)
        l_con_val, l_div_val = _finite("L_con", l_con, state), _finite("L_div", l_div, state)

    # phase 3: F_f, F_c
    state.opt_backbone.zero_grad()
    state.opt_classifier.zero_grad()
    l_cls, _ = loss_cls(state, batch)
    l_cls_val = _finite("L_cls", l_cls, state)
    l_cls.backward()
    state.opt_backbone.step()
    state.opt_classifier.step()
    return {"L_d": l_d_val, "L_con": l_con_val, "L_div": l_div_val, "L_cls": l_cls_val}


@dataclass
class StageMetrics:
    stage: int
    block: str
    steps: int
    val_accuracy: float
    mean_losses: dict
    discrepancy: list
    backbone_hash_start: str = ""
    backbone_hash_end: str = ""


@dataclass
class TrainResult:
    model: FsrModel
    stages: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)
    best_val: float = float("nan")
    best_step: int = 0
    steps_per_epoch: int = 0


def to_batch(split, index, model: FsrModel) -> Batch:
    d = np.array([model.domain_index[int(v)] for v in split.d[index]], dtype=np.int64)
    return Batch(split.x[index], split.y[index], d, split.d[index])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled batches, dropping each epoch's incomplete tail."""
    per_epoch = max(1, n // batch_size)
    while True:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * batch_size:(b + 1) * batch_size]


def block_label(positions) -> str:
    return "*" if len(positions) > 1 else str(positions[0])


def _snapshot(model: FsrModel) -> dict:
    return copy.deepcopy({k: v for k, v in model.state_dict().items() if not k.startswith("fsr")})


def progressive_train(splits: dict, config: TrainConfig,
                      on_step: Callable | None = None,
                      on_stage_end: Callable | None = None) -> TrainResult:
    """Train for ``config.stages`` stages of T iterations each.

    ``on_step(state, record)`` runs after every iteration and
    ``on_stage_end(state, metrics)`` after each stage.
    """
    train, val = splits["train"], splits["val"]
    if len(train) < 2:
        raise ValueError("training split too small")
    num_classes = int(max(train.y.max(), val.y.max() if len(val) else 0)) + 1
    model = FsrModel(num_classes, np.unique(train.d), config)
    if len(model.domains) < 2 and config.lam > 0 and not config.disable_L_div:
        log.warning("only one source domain; the diversity loss is degenerate")
    bb = model.backbone
    if config.mode == "progressive" and config.stages > bb.num_blocks:
        raise ValueError(f"{config.stages} stages exceed {bb.num_blocks} blocks")

    steps_per_epoch = max(1, len(train) // config.batch_size)
    iters = config.iters_per_stage or config.epochs_per_stage * steps_per_epoch
    data_rng = np.random.default_rng([config.seed, 1])
    batches = epoch_batches(len(train), min(config.batch_size, len(train)), data_rng)
    result = TrainResult(model, steps_per_epoch=steps_per_epoch)

    state = StageState(
        stage=0, positions=(), model=model,
        opt_backbone=SGD(bb.parameters(), config.lr_backbone, config.momentum, config.weight_decay),
        opt_classifier=SGD(model.classifier.parameters(), config.lr_head, config.momentum, config.weight_decay),
        opt_discriminator=SGD(model.discriminator.parameters(), config.lr_head, config.momentum,
                              config.weight_decay),
        opt_fsr=None,
        noise_rng=np.random.default_rng([config.seed, 2]),
    )
    best = (-1.0, None, 0)
    for n in range(1, config.stages + 1):
        positions = config.positions(n)
        if positions != state.positions:
            model.build_banks(positions)
            state.opt_fsr = SGD(model.fsr_parameters(), config.lr_fsr, config.momentum, config.weight_decay)
        state.stage, state.positions = n, positions
        start_hash = param_hash(bb.parameters())
        sums = {"L_d": 0.0, "L_con": 0.0, "L_div": 0.0, "L_cls": 0.0}
        label = block_label(positions)
        for t in range(iters):
            rec = train_step(state, to_batch(train, next(batches), model))
            for k in sums:
                sums[k] += rec[k]
            result.log_rows.append((state.step, n, label, rec["L_d"], rec["L_con"], rec["L_div"],
                                    rec["L_cls"], config.lr_backbone))
            if on_step is not None:
                on_step(state, rec)
            epoch_end = state.step % steps_per_epoch == 0 or t == iters - 1
            if config.select_best and epoch_end and len(val):
                acc = metrics.evaluate(model, val).accuracy
                if acc > best[0]:
                    best = (acc, _snapshot(model), state.step)
        val_acc = metrics.evaluate(model, val).accuracy if len(val) else float("nan")
        sm = StageMetrics(
            stage=n, block=label, steps=iters, val_accuracy=val_acc,
            mean_losses={k: v / iters for k, v in sums.items()},
            discrepancy=metrics.discrepancy_profile(model, train).values,
            backbone_hash_start=start_hash, backbone_hash_end=param_hash(bb.parameters()),
        )
        result.stages.append(sm)
        log.info("stage %d block %s: val acc %.4f", n, label, val_acc)
        if on_stage_end is not None:
            on_stage_end(state, sm)
    if config.select_best and best[1] is not None:
        model.load_state(best[1])
        result.best_val, result.best_step = best[0], best[2]
    else:
        result.best_val = result.stages[-1].val_accuracy
        result.best_step = state.step
    return result
