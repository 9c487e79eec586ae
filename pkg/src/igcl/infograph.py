"""Information graph over segments and class anchors, plus batch construction.

Nodes are segments and one anchor per class.  Context edges join segments
whose time windows overlap and that come from different streams; annotation
edges join a labeled segment to the anchor of its class.  Training batches
are built by sampling edges, deduplicating their endpoints and expanding the
batch adjacency to second order, ``B = A + A @ A``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import SamplingError

log = logging.getLogger(__name__)

SEGMENT = "seg"
ANCHOR = "anchor"


class NodeRef(NamedTuple):
    kind: str
    id: int

    @property
    def is_anchor(self) -> bool:
        return self.kind == ANCHOR


def seg(i: int) -> NodeRef:
    return NodeRef(SEGMENT, int(i))


def anchor(c: int) -> NodeRef:
    return NodeRef(ANCHOR, int(c))


def _key(u: NodeRef, v: NodeRef) -> tuple[NodeRef, NodeRef]:
    return (u, v) if u <= v else (v, u)


class InfoGraph:
    """Undirected, weighted, immutable after construction.

    ``context_edges`` holds segment-segment edges and ``annotation_edges``
    maps a class to its (segment, anchor) edges; both are the buckets edge
    sampling draws from.
    """

    def __init__(self, nodes: Iterable[NodeRef], edges: Iterable[tuple[NodeRef, NodeRef, float]] = (), n_classes: int = 0):
        self.n_classes = n_classes
        self._adj: dict[NodeRef, dict[NodeRef, float]] = {n: {} for n in nodes}
        self.context_edges: list[tuple[NodeRef, NodeRef]] = []
        self.annotation_edges: dict[int, list[tuple[NodeRef, NodeRef]]] = {c: [] for c in range(n_classes)}
        for u, v, w in edges:
            self._add(u, v, w)

    def _add(self, u: NodeRef, v: NodeRef, w: float = 1.0) -> None:
        if u == v:
            raise ValueError(f"self-loop on {u}")
        if u not in self._adj or v not in self._adj:
            raise ValueError(f"edge ({u}, {v}) references an unknown node")
        if w < 0:
            raise ValueError("edge weights must be non-negative")
        if v in self._adj[u]:
            return
        self._adj[u][v] = w
        self._adj[v][u] = w
        u, v = _key(u, v)
        if u.is_anchor and v.is_anchor:
            raise ValueError("anchor-anchor edges are not part of the graph")
        if u.is_anchor or v.is_anchor:
            a, s = (u, v) if u.is_anchor else (v, u)
            self.annotation_edges.setdefault(a.id, []).append((s, a))
        else:
            self.context_edges.append((u, v))

    @property
    def nodes(self) -> list[NodeRef]:
        return sorted(self._adj)

    def edges(self) -> list[tuple[NodeRef, NodeRef, float]]:
        out = []
        for u, nbrs in self._adj.items():
            for v, w in nbrs.items():
                if u < v:
                    out.append((u, v, w))
        return sorted(out)

    @property
    def n_edges(self) -> int:
        return len(self.context_edges) + sum(len(e) for e in self.annotation_edges.values())

    def __contains__(self, node) -> bool:
        return node in self._adj

    def has_edge(self, u: NodeRef, v: NodeRef) -> bool:
        return v in self._adj.get(u, {})

    def weight(self, u: NodeRef, v: NodeRef) -> float:
        return self._adj.get(u, {}).get(v, 0.0)

    def neighbors(self, u: NodeRef) -> Mapping[NodeRef, float]:
        return self._adj[u]

    def degree(self, u: NodeRef) -> int:
        return len(self._adj[u])

    def stats(self) -> dict:
        return {
            "n_nodes": len(self._adj),
            "n_segments": sum(1 for n in self._adj if not n.is_anchor),
            "n_anchors": sum(1 for n in self._adj if n.is_anchor),
            "n_edges": self.n_edges,
            "n_context_edges": len(self.context_edges),
            "n_annotation_edges": {str(c): len(e) for c, e in sorted(self.annotation_edges.items())},
        }


def build_info_graph(segments: Sequence, system_context: bool = True) -> InfoGraph:
    """Graph with one node per segment and context edges between overlapping
    windows of different streams.

    ``segments`` only need ``seg_id``, ``stream``, ``t_start`` and ``t_end``.
    With ``system_context=False`` the nodes are created but no context edges.
    """
    ids = [s.seg_id for s in segments]
    if len(set(ids)) != len(ids):
        raise ValueError("seg_ids must be unique")
    g = InfoGraph((seg(i) for i in ids))
    if not system_context:
        return g
    order = sorted(range(len(segments)), key=lambda i: (segments[i].t_start, segments[i].seg_id))
    for a, i in enumerate(order):
        si = segments[i]
        for j in order[a + 1 :]:
            sj = segments[j]
            # sorted by start, so sj.t_start >= si.t_start: overlap iff it starts before si ends
            if sj.t_start >= si.t_end:
                break
            if sj.stream != si.stream and min(si.t_end, sj.t_end) - sj.t_start > 0:
                g._add(seg(si.seg_id), seg(sj.seg_id), 1.0)
    return g


def add_annotation_anchors(g: InfoGraph, labeled: Iterable[tuple[int, int]], n_classes: int) -> InfoGraph:
    """Copy of ``g`` with ``n_classes`` anchors and one edge per labeled segment."""
    out = InfoGraph(list(g._adj) + [anchor(c) for c in range(n_classes)], n_classes=n_classes)
    for u, v, w in g.edges():
        out._add(u, v, w)
    for seg_id, c in labeled:
        if not 0 <= c < n_classes:
            raise ValueError(f"class {c} out of range for {n_classes} classes")
        if seg(seg_id) not in g:
            raise ValueError(f"unknown seg_id {seg_id}")
        out._add(seg(seg_id), anchor(c), 1.0)
    return out


# --------------------------------------------------------------------------
# sampling and batches
# --------------------------------------------------------------------------


def balanced_partition(total: int, classes: Sequence[int], rng: np.random.Generator) -> dict[int, int]:
    """Split ``total`` over ``classes`` so counts differ by at most one."""
    classes = list(classes)
    if not classes:
        return {}
    base, rem = divmod(total, len(classes))
    counts = {c: base for c in classes}
    for c in rng.permutation(classes)[:rem]:
        counts[int(c)] += 1
    return counts


@dataclass
class BalanceQuotas:
    """How the edges of one batch are divided between buckets.

    ``unlabeled_ratio`` is the target ratio of context edges to annotation
    edges.  ``per_class`` is filled by :meth:`allocate` for the last batch.
    """

    unlabeled_ratio: float = 4.5
    per_class: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.unlabeled_ratio > 0:
            raise ValueError("unlabeled_ratio must be positive")

    def allocate(self, n_edges: int, g: InfoGraph, rng: np.random.Generator) -> tuple[int, dict[int, int]]:
        labeled_classes = [c for c, e in sorted(g.annotation_edges.items()) if e]
        if not labeled_classes:
            n_ann = 0
        elif not g.context_edges:
            n_ann = n_edges
        else:
            n_ann = int(round(n_edges / (1.0 + self.unlabeled_ratio)))
            n_ann = min(max(n_ann, 1), n_edges - 1) if n_edges > 1 else n_edges
        self.per_class = balanced_partition(n_ann, labeled_classes, rng)
        return n_edges - n_ann, dict(self.per_class)


@dataclass
class EdgeSample:
    edges: list[tuple[NodeRef, NodeRef]]


def _draw(bucket: list, k: int, rng: np.random.Generator, name: str) -> list:
    if k <= 0:
        return []
    if k <= len(bucket):
        idx = rng.choice(len(bucket), size=k, replace=False)
    else:
        log.warning("edge bucket %s has %d edges, drawing %d with replacement", name, len(bucket), k)
        idx = rng.choice(len(bucket), size=k, replace=True)
    return [bucket[i] for i in idx]


def sample_edges(g: InfoGraph, n_edges: int, rng: np.random.Generator, quotas: BalanceQuotas | None = None) -> EdgeSample:
    """Draw exactly ``n_edges`` edges.

    Annotation edges come in equal numbers per labeled class, context edges
    uniformly; the two buckets are sized by ``quotas.unlabeled_ratio``.
    """
    if g.n_edges == 0:
        raise SamplingError("cannot sample from a graph without edges")
    if n_edges < 1:
        raise ValueError("n_edges must be positive")
    quotas = quotas or BalanceQuotas()
    n_ctx, per_class = quotas.allocate(n_edges, g, rng)
    edges = _draw(g.context_edges, n_ctx, rng, "context")
    for c in sorted(per_class):
        edges += _draw(g.annotation_edges[c], per_class[c], rng, f"class {c}")
    return EdgeSample(edges)


@dataclass
class Batch:
    nodes: list[NodeRef]
    A: np.ndarray
    B: np.ndarray
    edge_list: np.ndarray
    features: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def is_anchor(self) -> np.ndarray:
        return np.array([n.is_anchor for n in self.nodes], dtype=bool)

    @property
    def segment_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_anchor)

    @property
    def anchor_rows(self) -> np.ndarray:
        return np.flatnonzero(self.is_anchor)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.array([n.id for n in self.nodes if not n.is_anchor], dtype=int)


def build_batch(g: InfoGraph, sample: EdgeSample, features: np.ndarray | None = None, row_of: Mapping[int, int] | None = None) -> Batch:
    """Deduplicate sampled endpoints and build A (all graph edges among them)
    and B = A + A @ A.

    When ``features`` is given, rows for the batch's segments are gathered
    from it, using ``row_of[seg_id]`` or ``seg_id`` itself as row index.
    """
    index: dict[NodeRef, int] = {}
    for u, v in sample.edges:
        if not g.has_edge(u, v):
            raise ValueError(f"sampled edge ({u}, {v}) is not in the graph")
        for n in (u, v):
            if n not in index:
                index[n] = len(index)
    nodes = list(index)
    N = len(nodes)
    rows, cols, weights = [], [], []
    for i, u in enumerate(nodes):
        nbrs = g.neighbors(u)
        # anchors have huge neighborhoods; scan whichever side is smaller
        if len(nbrs) > N:
            hits = [(j, nbrs[v]) for j, v in enumerate(nodes) if v in nbrs]
        else:
            hits = [(index[v], w) for v, w in nbrs.items() if v in index]
        rows += [i] * len(hits)
        cols += [j for j, _ in hits]
        weights += [w for _, w in hits]
    A = np.zeros((N, N), dtype=np.int64)
    A[rows, cols] = weights
    # float matmul goes through BLAS and is exact for path counts below 2**53
    Af = A.astype(np.float64)
    B = A + np.rint(Af @ Af).astype(np.int64)
    edge_list = np.array([(index[u], index[v]) for u, v in sample.edges], dtype=int).reshape(-1, 2)
    feats = None
    if features is not None:
        ids = [n.id for n in nodes if not n.is_anchor]
        rows = [row_of[i] for i in ids] if row_of is not None else ids
        feats = features[rows]
    return Batch(nodes, A, B, edge_list, feats)


# --------------------------------------------------------------------------
# edge-list text format
# --------------------------------------------------------------------------


def write_edge_list(g: InfoGraph, path: str | Path) -> Path:
    """One edge per line: ``src_kind src_id dst_kind dst_id weight``.

    Isolated nodes are kept as ``# node kind id`` comment lines so the graph
    round-trips; plain edge-list readers skip them.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# n_classes {g.n_classes}"]
    lines += [f"# node {n.kind} {n.id}" for n in g.nodes if g.degree(n) == 0]
    lines += [f"{u.kind} {u.id} {v.kind} {v.id} {w:g}" for u, v, w in g.edges()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_edge_list(path: str | Path) -> InfoGraph:
    n_classes = 0
    nodes: list[NodeRef] = []
    edges = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if parts[1:2] == ["n_classes"]:
                n_classes = int(parts[2])
            elif parts[1:2] == ["node"]:
                nodes.append(NodeRef(parts[2], int(parts[3])))
            continue
        u = NodeRef(parts[0], int(parts[1]))
        v = NodeRef(parts[2], int(parts[3]))
        edges.append((u, v, float(parts[4])))
    for u, v, _ in edges:
        nodes += [u, v]
    g = InfoGraph(dict.fromkeys(nodes), n_classes=n_classes)
    for u, v, w in edges:
        g._add(u, v, w)
    return g
