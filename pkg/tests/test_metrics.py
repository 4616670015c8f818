import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rulegp import metrics as mt
from rulegp.metrics import EvalRecord


def offset_anchor(dy):
    t = np.arange(1, 13, dtype=float)
    return np.stack([t, np.full(12, float(dy))], axis=1)


GT = offset_anchor(0.0)


def rec(p, gt_class=0, gt=GT):
    return EvalRecord(np.asarray(p, dtype=float), gt, gt_class)


def test_top1_exact_is_zero():
    anchors = np.stack([GT, offset_anchor(2.0)])
    r = rec([0.7, 0.3])
    assert mt.min_ade_k(r, anchors, 1) == 0.0
    assert mt.min_fde_k(r, anchors, 1) == 0.0


def test_constant_offsets():
    anchors = np.stack([offset_anchor(3.0), offset_anchor(1.0)])
    r = rec([0.6, 0.4], gt_class=1)
    assert mt.min_ade_k(r, anchors, 1) == 3.0
    assert mt.min_ade_k(r, anchors, 2) == 1.0
    assert mt.min_fde_k(r, anchors, 1) == 3.0


def test_k_equals_K_full_scan():
    rng = np.random.default_rng(0)
    anchors = rng.normal(size=(9, 12, 2)).cumsum(axis=1)
    gt = rng.normal(size=(12, 2)).cumsum(axis=0)
    r = rec(rng.dirichlet(np.ones(9)), 0, gt)
    ade = min(sum(math.dist(a[t], gt[t]) for t in range(12)) / 12 for a in anchors)
    fde = min(math.dist(a[-1], gt[-1]) for a in anchors)
    assert mt.min_ade_k(r, anchors, 9) == pytest.approx(ade, rel=1e-14)
    assert mt.min_fde_k(r, anchors, 9) == pytest.approx(fde, rel=1e-14)


def test_nll_cases():
    assert mt.nll(rec([1.0, 0.0])) == 0.0
    assert mt.nll(rec([math.exp(-1), 1 - math.exp(-1)])) == pytest.approx(1.0, abs=1e-15)
    assert mt.nll(rec([0.0, 1.0])) == pytest.approx(12 * math.log(10), rel=1e-15)


def test_ece_cases():
    anchors = np.stack([GT, offset_anchor(1.0)])
    assert mt.ece([rec([1.0, 0.0], 0)] * 4) == 0.0
    half = [rec([0.9, 0.1], 0), rec([0.9, 0.1], 1)] * 5
    assert mt.ece(half) == pytest.approx(0.4, abs=1e-15)
    rng = np.random.default_rng(1)
    rs = [rec(rng.dirichlet(np.ones(2)), int(rng.integers(2))) for _ in range(50)]
    perm = [rs[i] for i in rng.permutation(50)]
    assert mt.ece(rs) == mt.ece(perm)
    with pytest.raises(mt.EmptyInputError):
        mt.ece([])
    del anchors


def test_ece_bin_edges():
    # 0.5 falls in (0.4, 0.5], 0.5000001 in (0.5, 0.6]
    a = mt.ece([rec([0.5, 0.5], 0)])
    assert a == pytest.approx(0.5)
    b = mt.ece([rec([0.5, 0.5], 0), rec([0.6, 0.4], 1)])
    assert b == pytest.approx(0.5 * 0.5 + 0.5 * 0.6)


def test_rank_cases():
    assert mt.rnk(rec([0.1, 0.6, 0.3], 1)) == 1
    assert mt.rnk(rec([0.2] * 5, 0)) == 1
    assert mt.rnk(rec([0.3, 0.25, 0.2, 0.15, 0.1], 4)) == 5


def random_records(rng, n, K=7):
    anchors = rng.normal(size=(K, 12, 2)).cumsum(axis=1)
    recs = [rec(rng.dirichlet(np.ones(K) * 0.5), int(rng.integers(K)), rng.normal(size=(12, 2)).cumsum(axis=0)) for _ in range(n)]
    return anchors, recs


def test_aggregate_single_and_duplicate():
    rng = np.random.default_rng(2)
    anchors, recs = random_records(rng, 20)
    one = mt.aggregate(recs[:1], anchors)
    r = recs[0]
    assert one["minADE_1"] == mt.min_ade_k(r, anchors, 1)
    assert one["NLL"] == mt.nll(r) and one["RNK"] == mt.rnk(r)
    row = mt.aggregate(recs, anchors)
    dup = mt.aggregate(recs + recs, anchors)
    for k in row:
        assert dup[k] == pytest.approx(row[k], rel=1e-15, abs=1e-15)


def test_aggregate_recompute():
    rng = np.random.default_rng(3)
    anchors, recs = random_records(rng, 100)
    row = mt.aggregate(recs, anchors)
    # independent recomputation with plain loops
    def ade(r, k):
        order = sorted(range(len(r.p)), key=lambda i: (-r.p[i], i))[:k]
        return min(sum(math.dist(anchors[i][t], r.gt_future[t]) for t in range(12)) / 12 for i in order)

    assert abs(row["minADE_1"] - sum(ade(r, 1) for r in recs) / 100) <= 1e-12
    assert abs(row["minADE_5"] - sum(ade(r, 5) for r in recs) / 100) <= 1e-12
    assert abs(row["NLL"] - sum(-math.log(max(r.p[r.gt_class], 1e-12)) for r in recs) / 100) <= 1e-12
    ranks = [1 + sum(1 for i in range(len(r.p)) if (r.p[i], -i) > (r.p[r.gt_class], -r.gt_class)) for r in recs]
    assert abs(row["RNK"] - sum(ranks) / 100) <= 1e-12
    with pytest.raises(mt.EmptyInputError):
        mt.aggregate([], anchors)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_min_ade_nonincreasing_in_k(seed):
    rng = np.random.default_rng(seed)
    anchors, recs = random_records(rng, 5, K=8)
    for r in recs:
        vals = [mt.min_ade_k(r, anchors, k) for k in range(1, 9)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_monotone_thousand_records():
    rng = np.random.default_rng(4)
    anchors, recs = random_records(rng, 1000, K=6)
    for r in recs:
        vals = [mt.min_ade_k(r, anchors, k) for k in range(1, 7)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_scale_equivariance(seed, s):
    rng = np.random.default_rng(seed)
    anchors, recs = random_records(rng, 3)
    for r in recs:
        scaled = EvalRecord(r.p, s * r.gt_future, r.gt_class)
        for k in (1, 3):
            assert abs(mt.min_ade_k(scaled, s * anchors, k) - s * mt.min_ade_k(r, anchors, k)) <= 1e-9 * max(1.0, s * mt.min_ade_k(r, anchors, k))
            assert abs(mt.min_fde_k(scaled, s * anchors, k) - s * mt.min_fde_k(r, anchors, k)) <= 1e-9 * max(1.0, s * mt.min_fde_k(r, anchors, k))


def test_record_validation():
    with pytest.raises(ValueError):
        rec([0.5, 0.6])
    with pytest.raises(ValueError):
        rec([0.5, 0.5], gt_class=2)


def test_csv_format():
    text = mt.rows_to_csv([{"a": 1, "b": 1 / 3}], ("a", "b"))
    assert text == "a,b\n1,0.333333333333333\n"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_bulk_evaluation_matches_aggregate(seed, n):
    rng = np.random.default_rng(seed)
    anchors, recs = random_records(rng, n)
    if n > 1:
        recs[1] = rec(recs[0].p.copy(), recs[0].gt_class, recs[0].gt_future)  # exact ties in p
    bulk = mt.evaluate_predictions(
        np.stack([r.p for r in recs]), np.stack([r.gt_future for r in recs]), np.array([r.gt_class for r in recs]), anchors
    )
    assert bulk == mt.aggregate(recs, anchors)
