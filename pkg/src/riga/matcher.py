"""Coarse-to-fine correspondence extraction.

Dense descriptors are interpolated from node descriptors, nodes are matched
by projected-descriptor distance, every matched node pair contributes the
points of both vicinities, and a slack-augmented Sinkhorn normalisation of
their similarity matrix yields point matches.

Sinkhorn marginals
------------------
Real rows and real columns carry unit mass. For an ``m x n`` similarity
block, the slack row carries ``1 + max(n - m, 0)`` and the slack column
``1 + max(m - n, 0)``, so row and column totals agree. For square blocks
every row and column of the augmented matrix sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from . import diffcore as dc
from .diffcore import Tensor
from .errors import InvalidInputError
from .geom import NodeSet, PointCloud, nearest_nodes

SIMILARITY_EPS = 1e-12
# log-marginal for padded rows/columns: exp() of it is exactly zero in float64
PAD_LOG_MASS = -1.0e3


@dataclass(frozen=True)
class InterpolationConfig:
    k: int = 3
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("k must be at least 1")


@dataclass
class CorrespondenceSet:
    """Index pairs ``(src[i], tgt[i])`` with confidence ``scores[i]``."""

    src: NDArray[np.int64]
    tgt: NDArray[np.int64]
    scores: NDArray[np.float64]
    level: str = "fine"

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.tgt = np.asarray(self.tgt, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (self.src.shape == self.tgt.shape == self.scores.shape):
            raise InvalidInputError("correspondence arrays must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInputError("correspondence scores must be finite")

    def __len__(self) -> int:
        return self.src.shape[0]

    @classmethod
    def empty(cls, level: str = "fine") -> "CorrespondenceSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), level)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.tgt.tolist()))

    def deduplicated(self) -> "CorrespondenceSet":
        """One entry per index pair, keeping the highest score; sorted by (src, tgt)."""
        if len(self) == 0:
            return self
        order = np.lexsort((-self.scores, self.tgt, self.src))
        s, t, c = self.src[order], self.tgt[order], self.scores[order]
        first = np.ones(len(s), dtype=bool)
        first[1:] = (s[1:] != s[:-1]) | (t[1:] != t[:-1])
        return CorrespondenceSet(s[first], t[first], c[first], self.level)

    def top(self, n: int) -> "CorrespondenceSet":
        """The ``n`` most confident pairs (ties by index pair)."""
        order = np.lexsort((self.tgt, self.src, -self.scores))[:n]
        return CorrespondenceSet(self.src[order], self.tgt[order], self.scores[order], self.level)

    @staticmethod
    def union(sets: Sequence["CorrespondenceSet"], level: str = "fine") -> "CorrespondenceSet":
        if not sets:
            return CorrespondenceSet.empty(level)
        merged = CorrespondenceSet(np.concatenate([s.src for s in sets]),
                                   np.concatenate([s.tgt for s in sets]),
                                   np.concatenate([s.scores for s in sets]), level)
        return merged.deduplicated()


@dataclass(frozen=True)
class VicinityGroup:
    node_x: int  # node positions
    node_y: int
    members_x: NDArray[np.int64]  # point indices, nearest-to-node first
    members_y: NDArray[np.int64]


@dataclass
class ConfidenceMatrix:
    values: NDArray[np.float64]  # (m + 1, n + 1), slack last
    log_values: NDArray[np.float64]
    alpha: float


# ---------------------------------------------------------------------------
# dense interpolation
# ---------------------------------------------------------------------------

def interpolation_weights(points, node_points, cfg: InterpolationConfig = InterpolationConfig()):
    """Inverse-distance weights over the k nearest nodes: ``(positions, weights)``.

    A node closer than ``cfg.epsilon`` takes all the weight.
    """
    pos, d = nearest_nodes(points, node_points, cfg.k)
    coincident = d < cfg.epsilon
    with np.errstate(divide="ignore"):
        inv = np.where(coincident, 0.0, 1.0 / np.where(coincident, 1.0, d))
    w = inv / inv.sum(axis=1, keepdims=True).clip(min=np.finfo(float).tiny)
    hit = coincident.any(axis=1)
    if np.any(hit):
        first = np.argmax(coincident[hit], axis=1)
        w[hit] = 0.0
        w[np.flatnonzero(hit), first] = 1.0
    return pos, w


def interpolation_matrix(cloud: PointCloud, nodes: NodeSet,
                         cfg: InterpolationConfig = InterpolationConfig()) -> NDArray[np.float64]:
    pos, w = interpolation_weights(cloud.points, cloud.points[nodes.indices], cfg)
    W = np.zeros((len(cloud), nodes.count))
    np.add.at(W, (np.repeat(np.arange(len(cloud)), pos.shape[1]), pos.reshape(-1)), w.reshape(-1))
    return W


def interpolate_dense(cloud: PointCloud, nodes: NodeSet, node_descs,
                      cfg: InterpolationConfig = InterpolationConfig()) -> Tensor:
    """Per-point descriptors as inverse-distance blends of node descriptors."""
    if nodes.count < 1:
        raise InvalidInputError("need at least one node")
    values = getattr(node_descs, "values", node_descs)
    values = values if isinstance(values, Tensor) else Tensor(values)
    return dc.matmul(dc.constant(interpolation_matrix(cloud, nodes, cfg)), values)


# ---------------------------------------------------------------------------
# coarse matching and grouping
# ---------------------------------------------------------------------------

def node_similarity(descs_a, descs_b) -> NDArray[np.float64]:
    a = np.asarray(getattr(descs_a, "data", descs_a), dtype=np.float64)
    b = np.asarray(getattr(descs_b, "data", descs_b), dtype=np.float64)
    d = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    with np.errstate(divide="ignore"):
        return np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0 / SIMILARITY_EPS)


def coarse_match(descs_a, descs_b, top_k: int) -> CorrespondenceSet:
    """The ``top_k`` node pairs by similarity 1/|a - b|, ties by (i, j)."""
    if top_k < 1:
        raise InvalidInputError("top_k must be at least 1")
    sim = node_similarity(descs_a, descs_b)
    if sim.size == 0:
        raise InvalidInputError("both descriptor sets must be nonempty")
    n, m = sim.shape
    ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    ii, jj, s = ii.reshape(-1), jj.reshape(-1), sim.reshape(-1)
    order = np.lexsort((jj, ii, -s))[: min(top_k, s.size)]
    return CorrespondenceSet(ii[order], jj[order], s[order], "coarse")


def truncated_vicinity(members, points, node_point, max_points: int) -> NDArray[np.int64]:
    members = np.asarray(members, dtype=np.int64)
    d = np.sqrt(np.sum((points[members] - node_point) ** 2, axis=1))
    order = np.lexsort((members, d))
    return members[order][:max_points]


def group_vicinities(coarse: CorrespondenceSet, vic_x: Sequence, vic_y: Sequence,
                     points_x, points_y, node_idx_x, node_idx_y, max_points: int):
    """Vicinity pairs for every coarse match; returns ``(groups, skipped)``.

    ``vic_x[i]`` lists the points assigned to node position ``i``. Each side
    keeps its ``max_points`` members nearest to the node. Pairs with an empty
    side are skipped and counted.
    """
    if len(coarse) == 0:
        raise InvalidInputError("coarse correspondence set is empty")
    groups, skipped = [], 0
    cache_x, cache_y = {}, {}
    for i, j in zip(coarse.src.tolist(), coarse.tgt.tolist()):
        if i not in cache_x:
            cache_x[i] = truncated_vicinity(vic_x[i], points_x, points_x[node_idx_x[i]], max_points)
        if j not in cache_y:
            cache_y[j] = truncated_vicinity(vic_y[j], points_y, points_y[node_idx_y[j]], max_points)
        mx, my = cache_x[i], cache_y[j]
        if mx.size == 0 or my.size == 0:
            skipped += 1
            continue
        groups.append(VicinityGroup(i, j, mx, my))
    return groups, skipped


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------

def slack_log_marginals(rows: Sequence[int], cols: Sequence[int], M: int, N: int):
    """Log-marginals for a padded batch of ``(rows[g] + slack) x (cols[g] + slack)`` blocks.

    Real rows occupy ``0..rows[g]-1``, the slack row is index ``M`` and the
    rows in between are padding; columns likewise.
    """
    G = len(rows)
    log_a = np.full((G, M + 1), PAD_LOG_MASS)
    log_b = np.full((G, N + 1), PAD_LOG_MASS)
    for g, (m, n) in enumerate(zip(rows, cols)):
        log_a[g, :m] = 0.0
        log_b[g, :n] = 0.0
        log_a[g, M] = np.log1p(max(n - m, 0))
        log_b[g, N] = np.log1p(max(m - n, 0))
    return log_a, log_b


def augment_scores(scores: Tensor, alpha: Tensor) -> Tensor:
    """Append a slack column and a slack row filled with ``alpha`` to ``(G, M, N)`` scores."""
    G, M, N = scores.shape
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=float).reshape(1))
    col = dc.reshape(dc.take(alpha, np.zeros(G * M, dtype=np.int64)), (G, M, 1))
    with_col = dc.concat_lastdim([scores, col])  # (G, M, N+1)
    row = dc.reshape(dc.take(alpha, np.zeros(G * (N + 1), dtype=np.int64)), (G, N + 1, 1))
    return dc.transpose(dc.concat_lastdim([dc.transpose(with_col, (0, 2, 1)), row]), (0, 2, 1))


def sinkhorn_log_batch(scores: Tensor, alpha, rows, cols, iterations: int = 100) -> Tensor:
    """Differentiable log confidence matrices for a padded ``(G, M, N)`` batch."""
    G, M, N = scores.shape
    log_a, log_b = slack_log_marginals(rows, cols, M, N)
    return dc.log_sinkhorn(augment_scores(scores, alpha), log_a, log_b, iterations)


def sinkhorn_normalize(similarity, alpha, iterations: int = 100) -> ConfidenceMatrix:
    """Slack-augmented, log-domain Sinkhorn normalisation of one similarity matrix."""
    S = np.asarray(getattr(similarity, "data", similarity), dtype=np.float64)
    if S.ndim != 2 or not np.all(np.isfinite(S)):
        raise InvalidInputError("similarity must be a finite 2-D matrix")
    a = float(np.asarray(getattr(alpha, "data", alpha)).reshape(-1)[0])
    m, n = S.shape
    with dc.no_grad():
        log_z = sinkhorn_log_batch(Tensor(S[None]), a, [m], [n], iterations).data[0]
    return ConfidenceMatrix(np.exp(log_z), log_z, a)


def extract_fine(Z, group: Optional[VicinityGroup] = None, mode: str = "row_and_col_argmax") -> CorrespondenceSet:
    """Row-wise and column-wise argmax matches of a confidence matrix.

    Matches landing in the slack row or column are dropped. ``mutual`` keeps
    only pairs that are the argmax in both directions. Indices are mapped to
    point indices through ``group`` when it is given.
    """
    if mode not in ("row_and_col_argmax", "mutual"):
        raise InvalidInputError(f"unknown extraction mode {mode!r}")
    Zv = np.asarray(getattr(Z, "values", Z), dtype=np.float64)
    m, n = Zv.shape[0] - 1, Zv.shape[1] - 1
    row_arg = np.argmax(Zv[:m], axis=1)  # over n + 1 columns
    col_arg = np.argmax(Zv[:, :n], axis=0)  # over m + 1 rows
    row_pairs = {(u, int(v)) for u, v in enumerate(row_arg) if v < n}
    col_pairs = {(int(u), v) for v, u in enumerate(col_arg) if u < m}
    chosen = row_pairs & col_pairs if mode == "mutual" else row_pairs | col_pairs
    if not chosen:
        return CorrespondenceSet.empty()
    uv = np.array(sorted(chosen), dtype=np.int64)
    scores = Zv[uv[:, 0], uv[:, 1]]
    src, tgt = uv[:, 0], uv[:, 1]
    if group is not None:
        src, tgt = group.members_x[src], group.members_y[tgt]
    return CorrespondenceSet(src, tgt, scores, "fine").deduplicated()
