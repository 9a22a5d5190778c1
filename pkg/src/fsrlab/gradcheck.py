"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class ParamReport:
    name: str
    checked: int
    max_rel_err: float
    max_abs_err: float
    finite: bool = True


@dataclass
class GradcheckReport:
    tol: float
    step: float
    params: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.finite and p.max_rel_err < self.tol for p in self.params)

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_rel_err:.3e} tol={self.tol:g}"]
        for p in self.params:
            flag = "" if p.finite else " NON-FINITE"
            lines.append(f"  {p.name:<28} n={p.checked:<4d} rel={p.max_rel_err:.3e} abs={p.max_abs_err:.3e}{flag}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-5):
    """|a - n| / max(|a|, |n|, floor); below ``floor`` the error is effectively absolute."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    max_checks: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradcheckReport:
    """Compare tape gradients of ``f()`` w.r.t. ``params`` against central differences.

    ``f`` must be deterministic (freeze any noise it draws). With
    ``max_checks`` set, at most that many coordinates per parameter are
    probed, chosen by a seeded generator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {loss.shape}")
    base_finite = bool(np.isfinite(loss.data).all())
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol, step=step)
    for name, p in zip(names, params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        numeric = np.empty(idx.size)
        finite = base_finite
        with no_grad():
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + step
                fp = f().item()
                flat[k] = orig - step
                fm = f().item()
                flat[k] = orig
                finite = finite and np.isfinite(fp) and np.isfinite(fm)
                numeric[j] = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[idx]
        if not np.isfinite(a).all():
            finite = False
        rel = relative_error(a, numeric, floor)
        report.params.append(ParamReport(
            name=name,
            checked=int(idx.size),
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            max_abs_err=float(np.abs(a - numeric).max()) if rel.size else 0.0,
            finite=bool(finite),
        ))
    return report
