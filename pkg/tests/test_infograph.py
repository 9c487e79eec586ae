import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igcl.exceptions import SamplingError
from igcl.infograph import (
    BalanceQuotas,
    EdgeSample,
    InfoGraph,
    add_annotation_anchors,
    anchor,
    balanced_partition,
    build_batch,
    build_info_graph,
    read_edge_list,
    sample_edges,
    seg,
    write_edge_list,
)
from igcl.siggen import Segment, StreamId

import oracles


def _seg(i, station, channel, t0, t1):
    return Segment(i, StreamId(station, channel), float(t0), float(t1), np.empty(0))


def _ids(g):
    return {frozenset((u.id, v.id)) for u, v in g.context_edges}


# -- graph construction ------------------------------------------------------


def test_context_edges_example():
    segs = [
        _seg(0, 0, 0, 0, 30), _seg(1, 1, 0, 0, 30),     # same window, other station
        _seg(2, 0, 1, 15, 45),                          # overlaps both
        _seg(3, 0, 0, 30, 60),                          # touches 0 and 1 only at t=30
        _seg(4, 0, 0, 15, 45),                          # same stream as 0 and 3
    ]
    g = build_info_graph(segs)
    assert _ids(g) == {frozenset(p) for p in [(0, 1), (0, 2), (1, 2), (1, 4), (2, 3), (2, 4)]}
    assert g.n_edges == 6


def test_without_system_context_there_are_no_edges():
    g = build_info_graph([_seg(0, 0, 0, 0, 30), _seg(1, 1, 0, 0, 30)], system_context=False)
    assert g.n_edges == 0 and len(g.nodes) == 2


def test_duplicate_seg_ids_rejected():
    with pytest.raises(ValueError):
        build_info_graph([_seg(0, 0, 0, 0, 30), _seg(0, 1, 0, 0, 30)])


def test_edges_are_deduplicated_and_undirected():
    g = InfoGraph([seg(0), seg(1)], [(seg(0), seg(1), 1.0), (seg(1), seg(0), 1.0)])
    assert g.n_edges == 1 and g.has_edge(seg(1), seg(0))
    with pytest.raises(ValueError):
        InfoGraph([seg(0)], [(seg(0), seg(0), 1.0)])


layouts = st.lists(
    st.tuples(st.integers(0, 3), st.integers(0, 2), st.integers(0, 40), st.integers(1, 12)),
    min_size=0, max_size=60,
)


@settings(max_examples=60, deadline=None)
@given(layouts)
def test_context_edges_match_bruteforce(layout):
    segs = [_seg(i, s, c, t, t + w) for i, (s, c, t, w) in enumerate(layout)]
    assert _ids(build_info_graph(segs)) == oracles.context_edges(segs)


def test_annotation_anchors():
    g = build_info_graph([_seg(0, 0, 0, 0, 30), _seg(1, 1, 0, 0, 30), _seg(2, 1, 0, 30, 60)])
    h = add_annotation_anchors(g, [(0, 1), (2, 1)], n_classes=3)
    assert anchor(1) in h and anchor(2) in h
    assert h.degree(anchor(1)) == 2 and h.degree(anchor(0)) == 0
    assert {k: len(v) for k, v in h.annotation_edges.items()} == {0: 0, 1: 2, 2: 0}
    assert g.n_edges == 1 and h.n_edges == 3
    with pytest.raises(ValueError):
        add_annotation_anchors(g, [(0, 3)], 3)
    with pytest.raises(ValueError):
        add_annotation_anchors(g, [(9, 0)], 3)


# -- sampling ----------------------------------------------------------------


def _grid_graph(n_seg=40, n_classes=3, labeled_every=3):
    segs = [_seg(i, i % 4, 0, 10 * (i // 4), 10 * (i // 4) + 15) for i in range(n_seg)]
    g = build_info_graph(segs)
    return add_annotation_anchors(g, [(i, (i // labeled_every) % n_classes) for i in range(0, n_seg, labeled_every)], n_classes)


@pytest.mark.parametrize("total, k", [(10, 3), (2, 3), (9, 3), (0, 2)])
def test_balanced_partition(total, k, rng):
    counts = balanced_partition(total, range(k), rng)
    assert sum(counts.values()) == total
    assert max(counts.values()) - min(counts.values()) <= 1


def test_sample_edges_quotas(rng):
    g = _grid_graph()
    q = BalanceQuotas(4.5)
    sample = sample_edges(g, 55, rng, q)
    assert len(sample.edges) == 55
    n_ann = sum(1 for u, v in sample.edges if u.is_anchor or v.is_anchor)
    assert n_ann == 10
    per = [sum(1 for u, v in sample.edges if anchor(c) in (u, v)) for c in range(3)]
    assert max(per) - min(per) <= 1 and per == [q.per_class[c] for c in range(3)]


def test_sample_edges_only_annotation_without_context(rng):
    g = add_annotation_anchors(build_info_graph([_seg(i, 0, 0, 30 * i, 30 * i + 30) for i in range(6)]), [(i, i % 2) for i in range(6)], 2)
    sample = sample_edges(g, 8, rng)
    assert all(anchor(0) in e or anchor(1) in e for e in sample.edges)


def test_sampling_errors(rng):
    with pytest.raises(SamplingError):
        sample_edges(InfoGraph([seg(0)]), 4, rng)
    with pytest.raises(ValueError):
        sample_edges(_grid_graph(), 0, rng)
    with pytest.raises(ValueError):
        BalanceQuotas(0.0)


# -- batches -----------------------------------------------------------------


def test_batch_B_path_example():
    # path 0 - 1 - 2 with both edges sampled
    g = InfoGraph([seg(0), seg(1), seg(2)], [(seg(0), seg(1), 1.0), (seg(1), seg(2), 1.0)])
    b = build_batch(g, EdgeSample([(seg(0), seg(1)), (seg(1), seg(2))]))
    assert b.nodes == [seg(0), seg(1), seg(2)]
    assert b.A.tolist() == [[0, 1, 0], [1, 0, 1], [0, 1, 0]]
    assert b.B.tolist() == [[1, 1, 1], [1, 2, 1], [1, 1, 1]]
    assert b.edge_list.tolist() == [[0, 1], [1, 2]]


def test_batch_single_edge():
    g = InfoGraph([seg(0), seg(1)], [(seg(0), seg(1), 1.0)])
    b = build_batch(g, EdgeSample([(seg(0), seg(1))]))
    assert b.size == 2
    assert b.B.tolist() == [[1, 1], [1, 1]]


def test_batch_includes_unsampled_graph_edges_and_dedups():
    g = InfoGraph([seg(i) for i in range(3)], [(seg(0), seg(1), 1.0), (seg(1), seg(2), 1.0), (seg(0), seg(2), 1.0)])
    b = build_batch(g, EdgeSample([(seg(0), seg(1)), (seg(1), seg(2)), (seg(0), seg(1))]))
    assert b.size == 3
    assert int(b.A.sum()) == 6


def test_batch_rejects_foreign_edges():
    g = InfoGraph([seg(0), seg(1)])
    with pytest.raises(ValueError):
        build_batch(g, EdgeSample([(seg(0), seg(1))]))


def test_batch_gathers_features():
    g = _grid_graph()
    F = np.arange(40 * 2, dtype=float).reshape(40, 2)
    b = build_batch(g, sample_edges(g, 12, np.random.default_rng(0)), F)
    assert np.array_equal(b.features, F[b.segment_ids])
    assert len(b.features) == len(b.segment_rows)
    assert all(b.nodes[i].is_anchor for i in b.anchor_rows)


def test_B_matches_naive_oracle_on_random_graphs(rng):
    for _ in range(30):
        n = int(rng.integers(2, 12))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4] or [(0, 1)]
        g = InfoGraph([seg(i) for i in range(n)], [(seg(i), seg(j), 1.0) for i, j in pairs])
        b = build_batch(g, EdgeSample([(seg(i), seg(j)) for i, j in pairs]))
        A = b.A.tolist()
        expected = [[a + p for a, p in zip(ra, rp)] for ra, rp in zip(A, oracles.matmul(A, A))]
        assert b.B.tolist() == expected
        assert np.array_equal(np.diag(b.B), b.A.sum(axis=1))


def test_dedup_bound(rng):
    g = _grid_graph()
    for _ in range(50):
        n_e = int(rng.integers(1, 30))
        assert build_batch(g, sample_edges(g, n_e, rng)).size <= 2 * n_e


# -- edge-list file ----------------------------------------------------------


def test_edge_list_roundtrip(tmp_path):
    g = _grid_graph()
    g = add_annotation_anchors(g, [], 4)  # class 3 anchor stays isolated
    path = write_edge_list(g, tmp_path / "sub" / "g.txt")
    h = read_edge_list(path)
    assert h.nodes == g.nodes
    assert h.edges() == g.edges()
    assert h.n_classes == 4
    assert path.read_text().splitlines()[0] == "# n_classes 4"
