import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadeseg.errors import DegenerateTest, InvalidArgument, UndefinedMetric
from cascadeseg.metrics import overlap_metrics, summarize, surface_distances, wilcoxon_signed_rank

from oracles import brute_surface_distances, enumerate_wilcoxon, sorted_summary


def test_overlap_examples():
    a = np.zeros((10, 1, 1)); b = np.zeros((10, 1, 1))
    a[:4] = 1; b[1:7] = 1
    m = overlap_metrics(a, b)
    assert m["dsc"] == 0.6 and m["jaccard"] == 3 / 7
    assert overlap_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == {"dsc": 1.0, "jaccard": 1.0}
    assert overlap_metrics(a, 1 - a)["dsc"] == 0.0
    with pytest.raises(InvalidArgument):
        overlap_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@given(st.integers(0, 100_000))
@settings(max_examples=50, deadline=None)
def test_dice_jaccard_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 5, 5, 5)) > rng.uniform(0.2, 0.9)
    if a.any() or b.any():
        m = overlap_metrics(a, b)
        assert abs(m["dsc"] - 2 * m["jaccard"] / (1 + m["jaccard"])) <= 1e-12


def test_surface_examples():
    a = np.zeros((10, 4, 4), bool); b = np.zeros((10, 4, 4), bool)
    a[1, 1, 1] = True; b[4, 1, 1] = True
    assert surface_distances(a, b)["hausdorff_mm"] == 3.0
    assert surface_distances(a, a) == {"hausdorff_mm": 0.0, "avgdist_mm": 0.0}
    assert surface_distances(a, b, (2.0, 1.0, 1.0))["hausdorff_mm"] == 6.0
    with pytest.raises(UndefinedMetric):
        surface_distances(a, np.zeros_like(a))


def test_surface_vs_all_pairs_oracle():
    rng = np.random.default_rng(0)
    for k in range(10):
        a = rng.uniform(size=(8, 8, 8)) > 0.6
        b = rng.uniform(size=(8, 8, 8)) > 0.7
        sp = (1.0, 0.7, 1.3) if k % 2 else (1.0, 1.0, 1.0)
        res = surface_distances(a, b, sp)
        hd, avg = brute_surface_distances(a, b, np.array(sp))
        assert abs(res["hausdorff_mm"] - hd) <= 1e-9 and abs(res["avgdist_mm"] - avg) <= 1e-9
        assert res["hausdorff_mm"] >= res["avgdist_mm"] >= 0


def test_summarize():
    assert summarize([5]) == {"mean": 5.0, "std": 0.0, "median": 5.0, "min": 5.0, "max": 5.0, "p10": 5.0, "p90": 5.0}
    s = summarize([1, 2, 3, 4, 5])
    assert s["median"] == 3 and s["mean"] == 3
    v = np.random.default_rng(1).normal(size=1000)
    ref = sorted_summary(v)
    for k, val in summarize(v).items():
        assert abs(val - ref[k]) <= 1e-9
    with pytest.raises(InvalidArgument):
        summarize([])


def test_wilcoxon_examples():
    x = np.arange(8.0)
    assert wilcoxon_signed_rank(x, x + 1.5) == 2 / 2**8
    y = np.random.default_rng(0).normal(size=12)
    z = np.random.default_rng(1).normal(size=12)
    assert wilcoxon_signed_rank(y, z) == wilcoxon_signed_rank(z, y)
    with pytest.raises(DegenerateTest):
        wilcoxon_signed_rank(x, x)
    with pytest.raises(InvalidArgument):
        wilcoxon_signed_rank([1, 2, 3], [2, 3, 4])


def test_wilcoxon_exhaustive_with_ties():
    rng = np.random.default_rng(2)
    for n in (5, 8, 10, 12):
        x = rng.integers(0, 6, n).astype(float)
        y = rng.integers(0, 6, n).astype(float)
        if np.count_nonzero(x - y) < 5:
            continue
        assert wilcoxon_signed_rank(x, y) == enumerate_wilcoxon(x, y)


def test_wilcoxon_normal_branch():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=40), rng.normal(size=40) + 0.3
    p = wilcoxon_signed_rank(x, y)
    assert 0 < p < 1
    assert math.isclose(p, wilcoxon_signed_rank(y, x))
