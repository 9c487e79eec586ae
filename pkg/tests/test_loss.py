import math

import numpy as np
import pytest

import oracles
from factories import random_batch

from igcl.exceptions import BatchLossError, DegenerateEmbeddingError
from igcl.infograph import EdgeSample, InfoGraph, anchor, build_batch, seg
from igcl.loss import (
    ANCHOR,
    LINK,
    LossConfig,
    assemble_embeddings,
    batch_contrastive_loss,
    contrastive_pairs,
    cosine_sim,
    cross_entropy,
    pair_loss,
)


def _random_Z(batch, rng, d=4):
    return assemble_embeddings(batch, rng.standard_normal((len(batch.segment_rows), d)), rng.standard_normal((batch.size, d)))


# -- single pairs ------------------------------------------------------------


def test_cosine_sim():
    assert cosine_sim([1, 0], [0, 2]) == 0.0
    assert cosine_sim([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(DegenerateEmbeddingError):
        cosine_sim([0, 0], [1, 0])


def test_pair_loss_can_be_negative():
    # aligned positive, one orthogonal negative, tau = 1: -(1 - log e^0) = -1
    Z = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    B = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    r = pair_loss(Z, B, 0, 1, LossConfig(tau=1.0))
    assert r.value == pytest.approx(-1.0)


def test_pair_loss_weighted_by_B():
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    B = np.array([[2, 3, 0], [3, 1, 0], [0, 0, 1]])
    # -3 * (0 - log e^{-1}) = -3
    assert pair_loss(Z, B, 0, 1, LossConfig(tau=1.0)).value == pytest.approx(-3.0)


def test_pair_loss_zero_weight_and_empty_denominator():
    Z = np.eye(3)
    B = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    r = pair_loss(Z, B, 0, 1, LossConfig(tau=1.0))
    assert r.value == 0.0 and not r.skipped
    full = np.ones((3, 3), dtype=int)
    r = pair_loss(Z, full, 0, 1)
    assert r.skipped and r.value == 0.0 and not r.dZ.any()
    with pytest.raises(ValueError):
        pair_loss(Z, B, 1, 1)


def test_pair_loss_matches_scalar_oracle(rng):
    for _ in range(20):
        N, d = int(rng.integers(3, 8)), int(rng.integers(2, 6))
        Z = rng.standard_normal((N, d))
        B = rng.integers(0, 3, (N, N)) * (rng.random((N, N)) < 0.5)
        s, t = rng.choice(N, 2, replace=False)
        tau = float(rng.uniform(0.05, 1.0))
        ref = oracles.pair_loss(Z.tolist(), B.tolist(), s, t, tau)
        r = pair_loss(Z, B, s, t, LossConfig(tau=tau))
        assert r.skipped == (ref is None)
        assert abs(r.value - (ref or 0.0)) < 1e-10


def test_pair_loss_gradient(rng):
    Z = rng.standard_normal((5, 3))
    B = np.array([[1, 1, 0, 0, 1], [1, 1, 0, 1, 0], [0, 0, 1, 0, 0], [0, 1, 0, 1, 0], [1, 0, 0, 0, 1]])
    cfg = LossConfig(tau=0.3)
    g = pair_loss(Z, B, 0, 1, cfg).dZ
    fd = oracles.central_difference(lambda: pair_loss(Z, B, 0, 1, cfg).value, Z)
    assert oracles.max_relative_error(g, fd) < 1e-4


# -- batches -----------------------------------------------------------------


def _anchor_batch():
    g = InfoGraph([seg(0), seg(1), seg(2), anchor(0), anchor(1)], n_classes=2)
    for u, v in [(seg(0), seg(1)), (seg(0), anchor(0)), (seg(2), anchor(0)), (seg(1), anchor(1))]:
        g._add(u, v)
    return build_batch(g, EdgeSample([(seg(0), seg(1)), (seg(0), anchor(0)), (seg(2), anchor(0))]))


def test_pairs_anchor_strategy():
    b = _anchor_batch()  # rows: s0, s1, a0, s2
    pairs, cand = contrastive_pairs(b, ANCHOR)
    assert sorted(map(tuple, pairs.tolist())) == sorted([(0, 1), (1, 0), (0, 2), (2, 0), (3, 2), (2, 3)])
    assert cand.all()


def test_pairs_link_strategy():
    b = _anchor_batch()
    pairs, cand = contrastive_pairs(b, LINK)
    # annotation edges of anchor 0 were sampled for s0 and s2, so they link
    assert sorted(map(tuple, pairs.tolist())) == sorted([(0, 1), (1, 0), (0, 3), (3, 0)])
    assert cand.tolist() == [True, True, False, True]


@pytest.mark.parametrize("strategy", [ANCHOR, LINK])
def test_batch_loss_matches_scalar_oracle(strategy, rng):
    checked = 0
    for _ in range(25):
        b = random_batch(rng)
        Z = _random_Z(b, rng)
        tau = float(rng.uniform(0.05, 1.0))
        ref = oracles.batch_loss(Z.tolist(), b.B.tolist(), b.edge_list.tolist(), b.is_anchor.tolist(), tau, strategy)
        if ref is None:
            with pytest.raises(BatchLossError):
                batch_contrastive_loss(b, Z, LossConfig(tau, strategy))
            continue
        assert abs(batch_contrastive_loss(b, Z, LossConfig(tau, strategy)).value - ref) < 1e-10
        checked += 1
    assert checked >= 10


@pytest.mark.parametrize("strategy", [ANCHOR, LINK])
def test_batch_loss_gradient(strategy, rng):
    done = 0
    while done < 5:
        b = random_batch(rng)
        Z = _random_Z(b, rng)
        cfg = LossConfig(0.2, strategy)
        try:
            res = batch_contrastive_loss(b, Z, cfg)
        except BatchLossError:
            continue
        seg_rows = b.segment_rows
        Zs = Z[seg_rows].copy()

        def f():
            Z2 = Z.copy()
            Z2[seg_rows] = Zs
            return batch_contrastive_loss(b, Z2, cfg).value

        fd = oracles.central_difference(f, Zs)
        assert oracles.max_relative_error(res.dZ[seg_rows], fd) < 1e-4
        assert not res.dZ[b.anchor_rows].any()
        done += 1


@pytest.mark.parametrize("tau", [0.01, 0.1, 1.0])
def test_batch_loss_is_finite_at_small_temperature(tau, rng):
    for _ in range(10):
        b = random_batch(rng)
        Z = _random_Z(b, rng)
        try:
            res = batch_contrastive_loss(b, Z, LossConfig(tau))
        except BatchLossError:
            continue
        assert math.isfinite(res.value) and np.all(np.isfinite(res.dZ))


def test_descent_pulls_positives_and_pushes_negatives(rng):
    # two disjoint edges: each pair is positive, the other pair is negative
    g = InfoGraph([seg(i) for i in range(4)], [(seg(0), seg(1), 1.0), (seg(2), seg(3), 1.0)])
    b = build_batch(g, EdgeSample([(seg(0), seg(1)), (seg(2), seg(3))]))
    Z = rng.standard_normal((4, 3))
    cfg = LossConfig(0.5)
    start = batch_contrastive_loss(b, Z, cfg).value
    pos, neg = cosine_sim(Z[0], Z[1]), cosine_sim(Z[0], Z[2])
    for _ in range(100):
        Z = Z - 0.05 * batch_contrastive_loss(b, Z, cfg).dZ
    assert batch_contrastive_loss(b, Z, cfg).value < start
    assert cosine_sim(Z[0], Z[1]) > max(pos, 0.9)
    assert cosine_sim(Z[0], Z[2]) < neg


def test_no_pairs_raises():
    g = InfoGraph([seg(0), anchor(0)], [(seg(0), anchor(0), 1.0)], n_classes=1)
    b = build_batch(g, EdgeSample([(seg(0), anchor(0))]))
    with pytest.raises(BatchLossError):
        batch_contrastive_loss(b, np.ones((2, 2)), LossConfig(strategy=LINK))


# -- cross-entropy -----------------------------------------------------------


def test_cross_entropy_examples():
    loss, grad = cross_entropy([0.0, 0.0], 1)
    assert loss == pytest.approx(math.log(2))
    assert np.allclose(grad, [0.5, -0.5])
    loss, grad = cross_entropy([[0.0, math.log(3)], [2.0, 2.0]], [1, 0])
    assert loss == pytest.approx((math.log(4 / 3) + math.log(2)) / 2)
    assert np.allclose(grad, [[0.125, -0.125], [-0.25, 0.25]])


def test_cross_entropy_large_logits_are_stable():
    loss, grad = cross_entropy([[1000.0, 0.0]], [1])
    assert loss == pytest.approx(1000.0)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy([[0.0, 1.0]], [2])
    with pytest.raises(ValueError):
        cross_entropy([[0.0, 1.0]], [0, 1])
