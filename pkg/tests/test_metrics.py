import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fsrlab import metrics
from fsrlab.metrics import DiscrepancyProfile, discrepancy_delta, domain_discrepancy, mixstyle, padain
from fsrlab.style import channel_stats
from fsrlab.tensor import Tensor


def brute_force(vecs):
    k = len(vecs)
    pairs = list(itertools.combinations(range(k), 2))
    return sum(float(np.sum(np.abs(np.asarray(vecs[a]) - np.asarray(vecs[b])))) for a, b in pairs) / len(pairs)


def test_hand_case():
    assert domain_discrepancy([0.0, 1.0, 3.0]) == 2.0


def test_identical_domains_zero(rng):
    m = rng.standard_normal((4, 3, 3))
    assert domain_discrepancy([m, m.copy(), m.copy()]) == 0.0


@given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_matches_pair_enumeration(k, c, seed):
    rng = np.random.default_rng(seed)
    maps = [rng.standard_normal((c, 3, 2)) for _ in range(k)]
    pooled = [m.mean(axis=(1, 2)) for m in maps]
    got = domain_discrepancy(maps)
    assert abs(got - brute_force(pooled)) <= 1e-10
    assert got >= 0
    perm = rng.permutation(k)
    assert abs(domain_discrepancy([maps[i] for i in perm]) - got) <= 1e-10


def test_discrepancy_errors():
    with pytest.raises(ValueError):
        domain_discrepancy([np.zeros(3)])
    with pytest.raises(ValueError):
        domain_discrepancy([np.zeros(3), np.zeros(4)])


def test_delta_properties():
    a = DiscrepancyProfile([1.0, 2.0, 3.0], "fsr")
    b = DiscrepancyProfile([1.5, 1.0, 3.5])
    assert discrepancy_delta(a, a) == [0.0, 0.0, 0.0]
    d1, d2 = discrepancy_delta(a, b), discrepancy_delta(b, a)
    assert d1 == [-0.5, 1.0, -0.5] and d2 == [-x for x in d1]
    with pytest.raises(ValueError):
        discrepancy_delta([1.0], [1.0, 2.0])


def test_profile_with_randomizer_active():
    from helpers import TINY_CHANNELS, tiny_benchmark
    from fsrlab.training import FsrModel, TrainConfig

    train = tiny_benchmark()["train"]
    model = FsrModel(7, sorted(set(train.d.tolist())), TrainConfig(channels=TINY_CHANNELS, seed=0))
    with pytest.raises(ValueError):
        metrics.discrepancy_profile(model, train, randomize=True)
    model.build_banks((2,))
    off = metrics.discrepancy_profile(model, train).values
    on = metrics.discrepancy_profile(model, train, randomize=True, seed=3).values
    # blocks before the bank are untouched, the bank's block and later ones are not
    assert on[0] == off[0]
    assert all(a != b for a, b in zip(on[1:], off[1:]))
    assert metrics.discrepancy_profile(model, train, randomize=True, seed=3).values == on


class _FixedModel:
    """Predicts a fixed label per sample index, for evaluate plumbing."""

    def __init__(self, k, seed):
        from fsrlab.nn import Backbone, Linear
        self.backbone = Backbone((4, 4, 4, 4), seed=seed)
        self.classifier = Linear(4, k, np.random.default_rng(seed))


def _split(n, k, seed):
    from fsrlab.data import Split
    rng = np.random.default_rng(seed)
    return Split(rng.uniform(0, 1, (n, 3, 8, 8)), rng.integers(0, k, n), np.zeros(n, np.int64),
                 [str(i) for i in range(n)])


def test_random_model_near_chance():
    k, n = 5, 2000
    model = _FixedModel(k, 0)
    split = _split(n, k, 1)
    res = metrics.evaluate(model, split)
    # labels are independent of the inputs, so accuracy is Binomial(n, 1/k) / n
    sd = np.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(res.accuracy - 1 / k) <= 3 * sd
    assert res.count == n


def test_evaluate_order_invariant_and_deterministic():
    model = _FixedModel(3, 2)
    split = _split(50, 3, 4)
    a = metrics.evaluate(model, split).accuracy
    perm = np.random.default_rng(0).permutation(50)
    assert metrics.evaluate(model, split.subset(perm)).accuracy == a
    assert metrics.evaluate(model, split).accuracy == a
    with pytest.raises(ValueError):
        metrics.evaluate(model, split.subset([]))


def test_memorizes_ten_samples():
    from fsrlab.nn import SGD, cross_entropy
    model = _FixedModel(3, 5)
    split = _split(10, 3, 6)
    params = model.backbone.parameters() + model.classifier.parameters()
    opt = SGD(params, lr=0.05, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        loss = cross_entropy(model.classifier(model.backbone.features(Tensor(split.x), update_stats=True)),
                             split.y)
        loss.backward()
        opt.step()
    assert metrics.evaluate(model, split).accuracy == 1.0


def test_mixstyle_weight_one_identity(rng):
    f = Tensor(rng.standard_normal((4, 3, 5, 5)))
    assert np.max(np.abs(mixstyle(f, rng, weight=1.0).data - f.data)) <= 1e-9


def test_padain_p0_identity_and_p1_swaps(rng):
    f = Tensor(rng.standard_normal((4, 3, 6, 6)) * rng.uniform(1, 3, (4, 3, 1, 1)))
    assert padain(f, rng, p=0.0) is f
    perm = np.array([2, 3, 1, 0])
    out = padain(f, rng, p=1.0, perm=perm)
    src, got = channel_stats(f), channel_stats(out)
    assert np.allclose(got.mu.data, src.mu.data[perm], atol=1e-6)
    assert np.allclose(got.sigma.data, src.sigma.data[perm], atol=1e-6)


def test_baseline_augment_dispatch(rng):
    f = Tensor(rng.standard_normal((4, 3, 5, 5)))
    assert metrics.baseline_augment(f, "padain", rng, p=0.0) is f
    with pytest.raises(ValueError):
        metrics.baseline_augment(f, "cutmix", rng)


def test_csv_emitters(tmp_path):
    metrics.write_csv(tmp_path / "log.csv", metrics.LOG_FIELDS, [(1, 1, "1", 0.5, 1.0, -1.0, 2.0, 0.03)])
    rows = metrics.read_csv(tmp_path / "log.csv")
    assert list(rows[0]) == list(metrics.LOG_FIELDS)
    assert float(rows[0]["L_d"]) == 0.5
    metrics.write_discrepancy(tmp_path / "d.csv", [DiscrepancyProfile([1.0, 2.0], "fsr")])
    assert (tmp_path / "d.csv").read_text() == "run,block,d_i\nfsr,1,1.0\nfsr,2,2.0\n"
    metrics.write_series(tmp_path / "s.csv", [1, 2], [0.25, 0.5], "epoch", "acc")
    assert (tmp_path / "s.csv").read_text() == "epoch,acc\n1,0.25\n2,0.5\n"
    # floats are written with full precision
    metrics.write_csv(tmp_path / "p.csv", ("v",), [(0.1 + 0.2,)])
    assert float(metrics.read_csv(tmp_path / "p.csv")[0]["v"]) == 0.1 + 0.2
