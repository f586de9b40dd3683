import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from flyt.exceptions import InvalidInputError
from flyt.mixing import ScoreTable
from flyt.sampling import (SampleManifest, gumbel_top_k, hcs_sample, nocap_sample, repetition_histogram,
                           scs_sample, shuffle_manifest, threshold_select)
from sampling_oracles import scs_two_item_distribution, sequential_batch_distribution, total_variation

LN3 = math.log(3)
TWO = (("u0", "u1"), np.array([LN3, 0.0]))


def test_scs_huge_penalty_gives_permutation():
    t = ScoreTable(["a", "b", "c"], {"s": [5.0, 0.0, -3.0]})
    for seed in range(10):
        m = scs_sample(t, 1e9, 3, 1, seed)
        assert sorted(m.uids) == ["a", "b", "c"]


def test_scs_zero_penalty_is_iid():
    m = scs_sample(TWO, 0.0, 100_000, 1, seed=3)
    assert abs(Counter(m.uids)["u0"] / 1e5 - 0.75) < 0.01


def test_scs_two_item_enumeration_oracle():
    exact = scs_two_item_distribution()
    assert exact[(0, 0)] == pytest.approx(0.375) and exact[(0, 1)] == pytest.approx(0.375)
    assert exact[(1, 0)] == pytest.approx(0.225) and exact[(1, 1)] == pytest.approx(0.025)
    assert sum(exact.values()) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_scs_batches_distinct_and_length(m, g, n, seed):
    r = np.random.default_rng(seed)
    uids = [f"x{i}" for i in range(m)]
    man = scs_sample((uids, r.standard_normal(m)), 0.3, n, g, seed)
    assert len(man) == n and set(man.uids) <= set(uids)
    pos = 0
    while pos < n:
        k = min(g, n - pos, m)
        assert len(set(man.uids[pos : pos + k])) == k
        pos += k


def test_scs_shift_invariance_seeded():
    r = np.random.default_rng(0)
    uids = [f"x{i}" for i in range(50)]
    s = r.standard_normal(50)
    for seed in range(5):
        a = scs_sample((uids, s), 0.2, 300, 16, seed)
        b = scs_sample((uids, s + 8.0), 0.2, 300, 16, seed)
        assert a == b


def test_scs_max_repetition_non_increasing_in_alpha():
    r = np.random.default_rng(1)
    uids = [f"x{i}" for i in range(200)]
    s = 2.0 * r.standard_normal(200)
    means = []
    for alpha in (0.1, 0.15, 0.25, 0.5):
        reps = [max(repetition_histogram(scs_sample((uids, s), alpha, 2000, 50, seed))) for seed in range(20)]
        means.append(np.mean(reps))
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_gumbel_first_batch_matches_sequential_oracle():
    s = np.array([0.5, -1.0, 1.2, 0.0, 0.3])
    exact = sequential_batch_distribution(s, 2)
    rng = np.random.default_rng(7)
    counts = Counter(tuple(gumbel_top_k(s, 2, rng)) for _ in range(50_000))
    emp = {k: v / 50_000 for k, v in counts.items()}
    assert total_variation(emp, exact) < 0.02


def test_hcs_examples():
    t = ScoreTable([f"x{i}" for i in range(7)], {"s": np.arange(7.0)})
    for seed in range(5):
        assert sorted(hcs_sample(t, 1, 7, seed).uids) == sorted(t.uids)
    rng = np.random.default_rng(11)
    first = sum(hcs_sample(TWO, 1, 2, rng).uids[0] == "u0" for _ in range(100_000))
    assert abs(first / 1e5 - 0.75) < 0.01


def test_hcs_uncapped_matches_nocap():
    s = np.array([1.0, 0.0, -0.5, 0.7])
    uids = ["a", "b", "c", "d"]
    p = np.exp(s) / np.exp(s).sum()
    for sampler in (lambda: hcs_sample((uids, s), 10**6, 100_000, 4), lambda: nocap_sample((uids, s), 100_000, 4)):
        c = Counter(sampler().uids)
        np.testing.assert_allclose([c[u] / 1e5 for u in uids], p, atol=0.01)


def test_hcs_cap_respected_and_errors():
    r = np.random.default_rng(2)
    uids = [f"x{i}" for i in range(20)]
    m = hcs_sample((uids, 3 * r.standard_normal(20)), 3, 55, 0)
    assert max(Counter(m.uids).values()) <= 3 and len(m) == 55
    with pytest.raises(InvalidInputError):
        hcs_sample((uids, np.zeros(20)), 2, 41, 0)


def test_nocap_examples():
    assert nocap_sample((["only"], [2.0]), 5, 0).uids == ("only",) * 5
    assert abs(Counter(nocap_sample(TWO, 100_000, 9).uids)["u0"] / 1e5 - 0.75) < 0.01
    uids = [f"x{i}" for i in range(10)]
    for seed in range(5):
        c = Counter(nocap_sample((uids, np.zeros(10)), 5000, seed).uids)
        assert chisquare([c[u] for u in uids]).pvalue > 0.01


def test_threshold_examples():
    t = ScoreTable(["a", "b", "c"], {"s": [3.0, 1.0, 2.0]})
    assert threshold_select(t, 1 / 3).uids == ("a",)
    assert threshold_select(t, 1.0).uids == ("a", "c", "b")
    tied = ScoreTable(["d", "b", "c", "a"], {"s": [1.0, 1.0, 5.0, 1.0]})
    assert threshold_select(tied, 0.5).uids == ("c", "a")
    with pytest.raises(InvalidInputError):
        threshold_select(t, 0.1)


def test_histogram_examples():
    assert repetition_histogram(SampleManifest(("a", "a", "b"))) == {1: 1, 2: 1}
    assert repetition_histogram(SampleManifest(())) == {}
    r = np.random.default_rng(0)
    uids = tuple(f"x{i}" for i in r.integers(0, 30, 500))
    naive = {}
    for u in set(uids):
        k = sum(1 for v in uids if v == u)
        naive[k] = naive.get(k, 0) + 1
    assert repetition_histogram(SampleManifest(uids)) == dict(sorted(naive.items()))


def test_sampler_input_errors():
    for bad in ([np.nan, 0.0], [np.inf, 1.0]):
        with pytest.raises(InvalidInputError):
            scs_sample((["a", "b"], bad), 0.1, 2, 1)
    with pytest.raises(InvalidInputError):
        scs_sample(TWO, -0.1, 2, 1)
    with pytest.raises(InvalidInputError):
        nocap_sample(([], []), 1)
    two_col = ScoreTable(["a"], {"x": [1.0], "y": [2.0]})
    with pytest.raises(InvalidInputError):
        nocap_sample(two_col, 1)
    assert nocap_sample(two_col, 1, column="y").uids == ("a",)


def test_shuffle_is_permutation():
    m = SampleManifest(tuple("aabcd"))
    s = shuffle_manifest(m, 3)
    assert sorted(s.uids) == sorted(m.uids)
