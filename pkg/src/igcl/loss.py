"""Graph-weighted contrastive loss and cross-entropy, with gradients.

For a source node ``s`` and target ``t`` of a batch with expanded adjacency
``B``::

    L[s, t] = -B[s, t] * (phi(z_s, z_t) / tau
                          - log sum_{n : B[s, n] == 0} exp(phi(z_s, z_n) / tau))

``phi`` is cosine similarity.  Every neighbor of ``s`` in ``B``, including
``t`` and ``s`` itself, is left out of the sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import BatchLossError, DegenerateEmbeddingError
from .infograph import Batch

LINK = "link"
ANCHOR = "anchor"
STRATEGIES = (LINK, ANCHOR)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    strategy: str = ANCHOR

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass
class PairLossResult:
    value: float
    dZ: np.ndarray
    skipped: bool = False


@dataclass
class ContrastiveResult:
    value: float
    dZ: np.ndarray
    n_pairs: int
    n_skipped: int


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateEmbeddingError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _normalize_rows(Z: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Zn = np.zeros_like(Z)
    norms = np.ones((Z.shape[0], 1))
    norms[rows] = np.linalg.norm(Z[rows], axis=1, keepdims=True)
    if np.any(norms[rows] == 0):
        raise DegenerateEmbeddingError("zero embedding in contrastive batch")
    Zn[rows] = Z[rows] / norms[rows]
    return Zn, norms


def _denormalize_grad(dZn: np.ndarray, Zn: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (dZn - np.sum(dZn * Zn, axis=1, keepdims=True) * Zn) / norms


def pair_loss(Z, B, s: int, t: int, cfg: LossConfig = LossConfig(), candidates=None) -> PairLossResult:
    """Loss of one ordered pair and its gradient w.r.t. every row of ``Z``.

    ``candidates`` restricts which rows may enter the denominator (default:
    all).  An empty denominator returns ``skipped=True`` with zero value and
    gradient.
    """
    Z = np.asarray(Z, dtype=float)
    B = np.asarray(B)
    N = Z.shape[0]
    if s == t:
        raise ValueError("source and target must differ")
    cand = np.ones(N, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    den = (B[s] == 0) & cand
    dZ = np.zeros_like(Z)
    w = float(B[s, t])
    if not den.any():
        return PairLossResult(0.0, dZ, skipped=True)
    if w == 0:
        return PairLossResult(0.0, dZ)
    rows = np.flatnonzero(cand | (np.arange(N) == s) | (np.arange(N) == t))
    Zn, norms = _normalize_rows(Z, rows)
    sims = Zn @ Zn[s] / cfg.tau
    lse = logsumexp(sims[den])
    value = -w * (sims[t] - lse)
    p = np.zeros(N)
    p[den] = np.exp(sims[den] - lse)
    # d value / d sims[n] for the similarities of s with t and with negatives
    g = w * p
    g[t] -= w
    dZn = np.zeros_like(Z)
    dZn[s] = (g @ Zn) / cfg.tau
    dZn += np.outer(g, Zn[s]) / cfg.tau
    return PairLossResult(float(value), _denormalize_grad(dZn, Zn, norms))


def contrastive_pairs(batch: Batch, strategy: str) -> tuple[np.ndarray, np.ndarray]:
    """Directed (source, target) pairs evaluated for a batch, and the mask of
    rows allowed as negatives.

    Context edges contribute both directions.  Under ``anchor``, an
    annotation edge contributes (segment, anchor) and (anchor, segment) and
    anchors act as negatives.  Under ``link``, anchors carry no embedding: an
    annotation edge (s, c) is replaced by the second-order pairs (s, t), (t, s)
    for every other segment t of a sampled annotation edge (t, c).
    """
    is_anchor = batch.is_anchor
    pairs: list[tuple[int, int]] = []
    members: dict[int, set[int]] = {}
    for u, v in batch.edge_list:
        u, v = int(u), int(v)
        if not (is_anchor[u] or is_anchor[v]) or strategy == ANCHOR:
            pairs += [(u, v), (v, u)]
            continue
        s, c = (v, u) if is_anchor[u] else (u, v)
        members.setdefault(c, set()).add(s)
    linked = {(s, t) for group in members.values() for s in group for t in group if s != t}
    pairs += sorted(linked)
    candidates = np.ones(batch.size, dtype=bool) if strategy == ANCHOR else ~is_anchor
    return np.array(pairs, dtype=int).reshape(-1, 2), candidates


def assemble_embeddings(batch: Batch, Z_segments: np.ndarray, anchors=None) -> np.ndarray:
    """Full N x d matrix: segment rows from the encoder, anchor rows from the
    fixed anchor vectors (left zero when ``anchors`` is None)."""
    Z = np.zeros((batch.size, Z_segments.shape[1]))
    Z[batch.segment_rows] = Z_segments
    rows = batch.anchor_rows
    if len(rows) and anchors is not None:
        a = anchors.a if hasattr(anchors, "a") else np.asarray(anchors)
        Z[rows] = a[[batch.nodes[r].id for r in rows]]
    return Z


def batch_contrastive_loss(batch: Batch, Z, cfg: LossConfig = LossConfig()) -> ContrastiveResult:
    """Mean pair loss over :func:`contrastive_pairs`, with gradient.

    ``Z`` has one row per batch node; under ``anchor`` the anchor rows hold
    the anchor vectors (see :func:`assemble_embeddings`).  Anchors are fixed,
    so their rows of the returned gradient are zero.  Pairs whose source has
    no negatives are dropped from the mean and counted in ``n_skipped``.
    """
    Z = np.asarray(Z, dtype=float)
    B = np.asarray(batch.B, dtype=float)
    N = batch.size
    pairs, cand = contrastive_pairs(batch, cfg.strategy)
    if len(pairs) == 0:
        raise BatchLossError("batch has no pairs to evaluate")
    Zn, norms = _normalize_rows(Z, np.flatnonzero(cand))
    S = Zn @ Zn.T / cfg.tau
    den = (B == 0) & cand[None, :]
    has_den = den.any(axis=1)
    masked = np.where(den, S, -np.inf)
    lse = np.full(N, np.nan)
    lse[has_den] = logsumexp(masked[has_den], axis=1)

    ps, pt = pairs[:, 0], pairs[:, 1]
    keep = has_den[ps]
    n_skipped = int((~keep).sum())
    ps, pt = ps[keep], pt[keep]
    if len(ps) == 0:
        raise BatchLossError(f"all {n_skipped} pairs have an empty denominator")
    w = B[ps, pt]
    P = len(ps)
    value = float(np.mean(-w * (S[ps, pt] - lse[ps])))

    dS = np.zeros((N, N))
    np.add.at(dS, (ps, pt), -w / P)
    row_weight = np.bincount(ps, weights=w / P, minlength=N)
    soft = np.zeros((N, N))
    soft[has_den] = np.exp(masked[has_den] - lse[has_den, None])
    dS += row_weight[:, None] * soft
    dZn = (dS + dS.T) @ Zn / cfg.tau
    dZ = _denormalize_grad(dZn, Zn, norms)
    dZ[~cand] = 0.0
    dZ[batch.anchor_rows] = 0.0
    return ContrastiveResult(value, dZ, P, n_skipped)


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy, averaged over rows for 2-d input.

    Returns the loss and its gradient w.r.t. ``logits``
    (``softmax - onehot``, divided by the number of rows).
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    L = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=int))
    n, k = L.shape
    if len(y) != n:
        raise ValueError("one label per row of logits is required")
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    lse = logsumexp(L, axis=1)
    loss = float(np.mean(lse - L[np.arange(n), y]))
    grad = np.exp(L - lse[:, None])
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad[0] if single else grad
