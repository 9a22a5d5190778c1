"""Shared fixtures for training tests: tiny benchmarks and a phase audit."""
import numpy as np

from fsrlab.data import default_domains, make_benchmark
from fsrlab.training import param_hash

TINY_CHANNELS = (4, 8, 8, 8)


def tiny_benchmark(seed=0, n_per_domain=70, target=1):
    doms = default_domains()
    return make_benchmark([d for d in doms if d.domain_id != target], doms[target],
                          class_count=7, n_per_domain=n_per_domain, seed=seed)


def group_hashes(model):
    bb = model.backbone
    return {
        "F_d": param_hash(model.discriminator.parameters()),
        "fsr": param_hash(model.fsr_parameters()),
        "F_f": param_hash(bb.parameters()) + param_hash([_Buf(b) for b in bb.buffers().values()]),
        "F_c": param_hash(model.classifier.parameters()),
    }


class _Buf:
    def __init__(self, data):
        self.data = data


class PhaseAudit:
    """Records which parameter groups changed in each phase of every step.

    Wraps the optimizer ``step`` methods: phase 1 ends after the
    discriminator step, phase 2 after the randomizer step, phase 3 after the
    classifier step (the backbone step runs just before it).
    """

    def __init__(self):
        self.violations = []
        self.steps = 0
        self._state = None

    def attach(self, state):
        self._state = state
        for name in ("opt_discriminator", "opt_fsr", "opt_backbone", "opt_classifier"):
            opt = getattr(state, name)
            if opt is None or getattr(opt, "_audited", False):
                continue
            opt.step = self._wrap(opt.step, name)
            opt._audited = True

    def _wrap(self, fn, name):
        def step():
            fn()
            self._after(name)
        return step

    def begin(self, state):
        self.attach(state)
        self.mark = group_hashes(state.model)

    def _after(self, name):
        if name == "opt_backbone":
            return
        now = group_hashes(self._state.model)
        changed = {k for k in now if now[k] != self.mark[k]}
        allowed = {"opt_discriminator": {"F_d"}, "opt_fsr": {"fsr"},
                   "opt_classifier": {"F_f", "F_c"}}[name]
        if not changed <= allowed:
            self.violations.append((self._state.step, name, sorted(changed - allowed)))
        self.mark = now


def install_audit(monkeypatch):
    """Route every ``train_step`` through a fresh :class:`PhaseAudit`."""
    from fsrlab import training
    audit = PhaseAudit()
    original = training.train_step

    def step(state, batch):
        audit.begin(state)
        out = original(state, batch)
        audit.steps += 1
        return out
    monkeypatch.setattr(training, "train_step", step)
    return audit


def hashes_equal(a, b):
    return all(a[k] == b[k] for k in a)


def assert_close(a, b, tol):
    assert np.max(np.abs(np.asarray(a) - np.asarray(b))) <= tol
