"""Metric oracles, aggregation rules, pair search, and CSV formats."""

import numpy as np
import pytest

from shiftgrid import ingest, metrics
from shiftgrid.cunet import CUNetConfig, build
from shiftgrid.errors import ShapeMismatch, ZeroVector
from shiftgrid.metrics import (MetricsReport, PairStudyResult,
                               accuracy_metrics, aggregate, binarize,
                               cosine_similarity, find_similar_pairs,
                               metrics_csv, pair_divergence, pairs_csv)


def _grid(cells, g=3):
    a = np.zeros((g, g), np.uint8)
    for i, j in cells:
        a[i, j] = 1
    return a


# ---------------------------------------------------------------------------
# binarize


def test_binarize_ties_round_up():
    out = binarize(np.array([[0.5, 0.49], [0.51, 0.0]]), 0.5)
    np.testing.assert_array_equal(out, [[1, 0], [1, 0]])


def test_binarize_all_below_threshold():
    assert binarize(np.full((3, 3), 0.4), 0.5).sum() == 0


def test_binarize_idempotent():
    rng = np.random.default_rng(0)
    x = rng.random((5, 5))
    once = binarize(x, 0.5)
    np.testing.assert_array_equal(binarize(once, 0.5), once)


# ---------------------------------------------------------------------------
# accuracy metrics


def test_accuracy_metrics_hand_example():
    pre = _grid([(0, 0)])
    post = _grid([(0, 0), (0, 1)])
    pred = _grid([(0, 0), (1, 1)])
    r = accuracy_metrics(pred, post, pre)
    assert r.overall == 0.5
    assert r.visited == 1.0
    assert r.unvisited == 0.0
    assert r.cellwise == 7 / 9  # (0,1) missed and (1,1) spurious


def test_accuracy_metrics_perfect_prediction():
    rng = np.random.default_rng(1)
    post = (rng.random((6, 6)) > 0.5).astype(np.uint8)
    pre = (rng.random((6, 6)) > 0.5).astype(np.uint8)
    r = accuracy_metrics(post, post, pre)
    for v in (r.overall, r.visited, r.unvisited):
        assert v is None or v == 1.0
    assert r.cellwise == 1.0


def test_accuracy_metrics_empty_post_undefined():
    r = accuracy_metrics(_grid([(1, 1)]), _grid([]), _grid([(0, 0)]))
    assert r.overall is None and r.visited is None and r.unvisited is None
    assert r.cellwise == 8 / 9


def test_accuracy_metrics_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        accuracy_metrics(np.zeros((3, 3)), np.zeros((4, 4)), np.zeros((3, 3)))


def test_accuracy_metrics_brute_force_oracle():
    """Exact agreement with per-cell enumeration on 1000 random 8x8 triples."""
    rng = np.random.default_rng(2)
    for _ in range(1000):
        pred, post, pre = (rng.random((8, 8)) > rng.random() for _ in range(3))
        n_o = n_v = n_u = c_o = c_v = c_u = agree = 0
        for i in range(8):
            for j in range(8):
                if post[i, j]:
                    n_o += 1
                    c_o += pred[i, j]
                    if pre[i, j]:
                        n_v += 1
                        c_v += pred[i, j]
                    else:
                        n_u += 1
                        c_u += pred[i, j]
                agree += pred[i, j] == post[i, j]
        r = accuracy_metrics(pred, post, pre)
        assert r.overall == (c_o / n_o if n_o else None)
        assert r.visited == (c_v / n_v if n_v else None)
        assert r.unvisited == (c_u / n_u if n_u else None)
        assert r.cellwise == agree / 64
        # overall's numerator decomposes into visited + unvisited numerators
        assert c_o == c_v + c_u
        assert (r.n_overall, r.n_visited, r.n_unvisited) == (n_o, n_v, n_u)


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_means():
    a = MetricsReport(0.4, 1.0, 0.0, 0.9, 5, 2, 3)
    b = MetricsReport(0.6, 0.5, 0.5, 0.7, 4, 2, 2)
    agg = aggregate([a, b])
    assert agg.overall == pytest.approx(0.5)
    assert agg.cellwise == pytest.approx(0.8)
    assert agg.n_overall == 2


def test_aggregate_excludes_undefined():
    a = MetricsReport(0.4, None, 0.0, 0.9, 5, 0, 3)
    b = MetricsReport(0.6, 0.8, None, 0.7, 4, 2, 0)
    agg = aggregate([a, b])
    assert agg.visited == 0.8 and agg.n_visited == 1
    assert agg.unvisited == 0.0 and agg.n_unvisited == 1


def test_aggregate_empty():
    agg = aggregate([])
    assert agg.overall is None and agg.cellwise == 0.0


# ---------------------------------------------------------------------------
# cosine similarity and pair search


def test_cosine_identity_and_orthogonality():
    assert cosine_similarity([1, 0, 1], [1, 0, 1]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)


def test_cosine_symmetric_and_scale_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.random(6), rng.random(6)
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-12)
        assert cosine_similarity(2 * a, b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)


def test_cosine_zero_vector_raises():
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


def _sample(uid, pre_cells, sir, g=4, k=2):
    pre = _grid(pre_cells, g)
    return ingest.IndividualSample(
        uid,
        ingest.MovementGrid(uid, ingest.Phase.PRE, pre, (0, 0)),
        ingest.MovementGrid(uid, ingest.Phase.POST, pre.copy(), (0, 0)),
        ingest.SIRVector(uid, np.asarray(sir, np.float64)),
        ingest.SpatialContext(uid, np.zeros((k, g, g)), (0, 0)),
    )


def test_find_similar_pairs_identical_pre_orthogonal_sir():
    a = _sample(1, [(0, 0), (1, 1)], [1.0, 0.0])
    b = _sample(2, [(0, 0), (1, 1)], [0.0, 1.0])
    pairs = find_similar_pairs([a, b], pre_sim_min=0.3, sir_sim_max=0.1)
    assert len(pairs) == 1
    uid_a, uid_b, pre_cos, sir_cos = pairs[0]
    assert (uid_a, uid_b) == (1, 2)
    assert pre_cos == pytest.approx(1.0)
    assert sir_cos == pytest.approx(0.0)


def test_find_similar_pairs_strict_threshold():
    a = _sample(1, [(0, 0)], [1.0, 0.0])
    b = _sample(2, [(1, 1)], [0.0, 1.0])  # disjoint grids: pre cosine 0
    assert find_similar_pairs([a, b], pre_sim_min=0.0, sir_sim_max=0.1) == []


def test_find_similar_pairs_skips_zero_vectors():
    a = _sample(1, [(0, 0)], [1.0, 0.0])
    z = _sample(2, [], [1.0, 0.0])            # all-zero grid
    w = _sample(3, [(0, 0)], [0.0, 0.0])      # all-zero reliance
    assert find_similar_pairs([a, z, w], 0.0, 1.1) == []


def test_find_similar_pairs_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    samples = []
    for uid in range(100):
        cells = [(int(rng.integers(0, 4)), int(rng.integers(0, 4)))
                 for _ in range(int(rng.integers(0, 6)))]
        samples.append(_sample(uid, cells, rng.dirichlet([0.5, 0.5])))

    expected = []
    usable = [s for s in samples if s.v_pre.bitmap.any() and s.sir.values.any()]
    for i in range(len(usable)):
        for j in range(i + 1, len(usable)):
            a, b = usable[i], usable[j]
            pc = cosine_similarity(a.v_pre.bitmap, b.v_pre.bitmap)
            sc = cosine_similarity(a.sir.values, b.sir.values)
            if pc > 0.3 and sc < 0.5:
                expected.append((a.user_id, b.user_id, pc, sc))
    expected.sort(key=lambda t: (-t[2], t[3]))
    assert find_similar_pairs(samples) == expected


def test_pair_divergence_baseline_ignores_conditions():
    model = build(CUNetConfig(g=4, k=2, variant="baseline", base_channels=8, seed=0))
    a = _sample(1, [(0, 0), (2, 2)], [1.0, 0.0])
    b = _sample(2, [(0, 0), (2, 2)], [0.0, 1.0])
    res = pair_divergence(model, a, b)
    assert res.map_l1_mean == 0.0
    assert res.pre_cosine == pytest.approx(1.0)


def test_pair_divergence_self_pair():
    model = build(CUNetConfig(g=4, k=2, variant="full", base_channels=8, seed=0))
    a = _sample(1, [(0, 0), (2, 2)], [0.7, 0.3])
    res = pair_divergence(model, a, a)
    assert res.map_l1_mean == 0.0
    assert res.pre_cosine == pytest.approx(1.0)
    assert res.sir_cosine == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# CSV formats


def test_metrics_csv_format():
    r = MetricsReport(0.5, None, 0.25, 0.75, 4, 0, 2)
    text = metrics_csv([("baseline", r)])
    lines = text.splitlines()
    assert lines[0] == "variant,overall,visited,unvisited,cellwise,n_overall,n_visited,n_unvisited"
    assert lines[1] == "baseline,0.500000,,0.250000,0.750000,4,0,2"
    assert text.endswith("\n")


def test_pairs_csv_format():
    text = pairs_csv([PairStudyResult(1, 2, 0.31, 0.05, 0.024)])
    lines = text.splitlines()
    assert lines[0] == "uid_a,uid_b,pre_cosine,sir_cosine,map_l1_mean"
    assert lines[1] == "1,2,0.310000,0.050000,0.024000"


def test_pairs_csv_empty():
    assert pairs_csv([]) == "uid_a,uid_b,pre_cosine,sir_cosine,map_l1_mean\n"
