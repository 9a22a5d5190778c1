import numpy as np

from fsrlab import tensor as T
from fsrlab.checks import SUITE, run_suite
from fsrlab.gradcheck import gradcheck, relative_error
from fsrlab.style import instance_norm
from fsrlab.tensor import Tensor


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert np.isclose(relative_error(2.0, 1.0), 0.5)
    # below the floor the error is effectively absolute
    assert np.isclose(relative_error(1e-9, 0.0), 1e-9 / 1e-5)


def test_identity_sum_is_exact_up_to_noise():
    x = Tensor(np.random.default_rng(0).uniform(-2, 2, 10), requires_grad=True, name="x")
    rep = gradcheck(lambda: x.sum(), [x])
    assert rep.passed and rep.max_rel_err < 1e-8


def test_instance_norm_passes():
    rng = np.random.default_rng(1)
    f = Tensor(rng.uniform(-2, 2, (2, 3, 4, 4)), requires_grad=True, name="f")
    m = rng.standard_normal((2, 3, 4, 4))
    rep = gradcheck(lambda: (instance_norm(f, np.ones(3), np.zeros(3)) * m).sum(), [f], tol=1e-4, step=1e-5)
    assert rep.passed, rep.summary()


def _buggy_square(t):
    # forward t^2 but backward claims t
    return T._make(t.data ** 2, (t,), lambda g: (g * t.data,))


def test_detects_wrong_gradient():
    x = Tensor([1.0, 2.0, -1.5], requires_grad=True, name="x")
    rep = gradcheck(lambda: _buggy_square(x).sum(), [x])
    assert not rep.passed
    assert rep.max_rel_err > 0.4


def test_flags_non_finite():
    x = Tensor([1.0, 0.0], requires_grad=True, name="x")
    T.STRICT, old = False, T.STRICT
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            rep = gradcheck(lambda: T.log(x).sum(), [x])
    finally:
        T.STRICT = old
    assert not rep.passed
    assert not rep.params[0].finite


def test_max_checks_subsamples():
    x = Tensor(np.ones(100), requires_grad=True, name="x")
    rep = gradcheck(lambda: (x * x).sum(), [x], max_checks=7)
    assert rep.params[0].checked == 7


def test_full_suite_passes():
    results = run_suite()
    assert len(results) == len(SUITE)
    failures = [r.name for r in results if not r.report.passed]
    assert not failures
