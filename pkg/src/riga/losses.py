"""Training objectives: overlap statistics, circle loss, ground-truth point
matches and the negative log-likelihood refinement loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import diffcore as dc
from .diffcore import Tensor
from .errors import InvalidInputError
from .geom import RigidTransform

LOG_FLOOR = np.log(1e-30)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma: float = 10.0
    tau_p: float = 0.05
    anchors_per_frame: int = 128
    train_coarse: int = 256

    def __post_init__(self):
        if not self.delta_p < self.delta_n:
            raise InvalidInputError("delta_p must be below delta_n")
        if self.gamma <= 0 or self.tau_p <= 0:
            raise InvalidInputError("gamma and tau_p must be positive")


@dataclass(frozen=True)
class OverlapStats:
    n_i_to_j: int
    n_j_to_i: int
    ratio: float


@dataclass(frozen=True)
class GtMatchSets:
    matches: NDArray[np.int64]  # (k, 2) local (row, col) indices
    unmatched_x: NDArray[np.int64]
    unmatched_y: NDArray[np.int64]


def _close_pairs(px, py, tau):
    """All (u, v) with |px[u] - py[v]| < tau, via a k-d tree plus an exact recheck."""
    if len(px) == 0 or len(py) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lists = cKDTree(py).query_ball_point(px, tau * (1 + 1e-9) + 1e-12)
    u = np.repeat(np.arange(len(px)), [len(l) for l in lists]).astype(np.int64)
    v = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=len(u))
    keep = np.sqrt(np.sum((px[u] - py[v]) ** 2, axis=1)) < tau
    return u[keep], v[keep]


def overlap_stats(vic_x, vic_y, T_gt: RigidTransform, tau_p: float) -> OverlapStats:
    """Visible-point counts of two vicinities (given as coordinates) and their overlap ratio."""
    px = np.asarray(vic_x, dtype=np.float64).reshape(-1, 3)
    py = np.asarray(vic_y, dtype=np.float64).reshape(-1, 3)
    if len(px) == 0 or len(py) == 0:
        raise InvalidInputError("vicinities must be nonempty")
    u, v = _close_pairs(T_gt.apply(px), py, tau_p)
    nij, nji = np.unique(u).size, np.unique(v).size
    return OverlapStats(nij, nji, 0.5 * (nij / len(px) + nji / len(py)))


def overlap_ratio_matrix(points_x, points_y, assign_x, assign_y, n_nodes_x: int, n_nodes_y: int,
                         T_gt: RigidTransform, tau_p: float):
    """Overlap ratio between every vicinity pair: ``(ratios, n_ij, n_ji)`` matrices."""
    u, v = _close_pairs(T_gt.apply(points_x), np.asarray(points_y, dtype=np.float64), tau_p)
    ai, aj = assign_x[u], assign_y[v]
    n_ij = np.zeros((n_nodes_x, n_nodes_y), dtype=np.int64)
    n_ji = np.zeros((n_nodes_x, n_nodes_y), dtype=np.int64)
    if u.size:
        key_u = np.unique(np.stack([ai, aj, u], axis=1), axis=0)
        np.add.at(n_ij, (key_u[:, 0], key_u[:, 1]), 1)
        key_v = np.unique(np.stack([ai, aj, v], axis=1), axis=0)
        np.add.at(n_ji, (key_v[:, 0], key_v[:, 1]), 1)
    size_x = np.bincount(assign_x, minlength=n_nodes_x).astype(float)
    size_y = np.bincount(assign_y, minlength=n_nodes_y).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        rx = np.where(size_x[:, None] > 0, n_ij / size_x[:, None], 0.0)
        ry = np.where(size_y[None, :] > 0, n_ji / size_y[None, :], 0.0)
    return 0.5 * (rx + ry), n_ij, n_ji


def _circle_side(dist: Tensor, ratios: NDArray, anchors: NDArray, cfg: LossConfig) -> Optional[Tensor]:
    pos = ratios > 0
    neg = ratios == 0
    valid = anchors[pos[anchors].any(axis=1) & neg[anchors].any(axis=1)]
    if valid.size == 0:
        return None
    d = dc.take(dist, valid, axis=0)
    r = ratios[valid]
    dp = d - cfg.delta_p
    dn = dc.neg(d) + cfg.delta_n
    # exponents r * beta_p * (d - delta_p) and beta_n * (delta_n - d)
    pos_logit = dc.mul(dc.constant(cfg.gamma * r), dc.mul(dp, dp))
    neg_logit = dc.mul_scalar(dc.mul(dn, dn), cfg.gamma)
    per_anchor = dc.softplus(dc.masked_logsumexp(pos_logit, pos[valid]) +
                             dc.masked_logsumexp(neg_logit, neg[valid]))
    return dc.mean(per_anchor)


def circle_loss(desc_x: Tensor, desc_y: Tensor, ratios, cfg: LossConfig = LossConfig(),
                anchors_x=None, anchors_y=None):
    """Overlap-weighted circle loss, averaged over the two frames.

    ``ratios[i, j]`` is the vicinity overlap ratio of node i in X and node j
    in Y: positives have a ratio above zero, negatives exactly zero. Anchors
    without both a positive and a negative are skipped. Returns
    ``(loss, skipped_all)``; when no anchor survives on either side the loss
    is zero and a warning is issued.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    ax = np.arange(ratios.shape[0]) if anchors_x is None else np.asarray(anchors_x, np.int64)
    ay = np.arange(ratios.shape[1]) if anchors_y is None else np.asarray(anchors_y, np.int64)
    dist = dc.pairwise_distance(desc_x, desc_y)
    lx = _circle_side(dist, ratios, ax, cfg)
    ly = _circle_side(dc.transpose(dist, (1, 0)), ratios.T, ay, cfg)
    terms = [t for t in (lx, ly) if t is not None]
    if not terms:
        warnings.warn("circle loss: every anchor lacked positives or negatives", RuntimeWarning)
        return Tensor(0.0), True
    # a side with no surviving anchor contributes zero to the half-sum
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return dc.mul_scalar(total, 0.5), False


def build_gt_sets(points_x, points_y, T_gt: RigidTransform, tau_p: float) -> GtMatchSets:
    """Ground-truth matches between two vicinities (coordinates in vicinity order)."""
    px = np.asarray(points_x, dtype=np.float64).reshape(-1, 3)
    py = np.asarray(points_y, dtype=np.float64).reshape(-1, 3)
    u, v = _close_pairs(T_gt.apply(px) if len(px) else px, py, tau_p)
    order = np.lexsort((v, u))
    matches = np.stack([u[order], v[order]], axis=1) if u.size else np.zeros((0, 2), np.int64)
    unmatched_x = np.setdiff1d(np.arange(len(px)), u)
    unmatched_y = np.setdiff1d(np.arange(len(py)), v)
    return GtMatchSets(matches, unmatched_x, unmatched_y)


def gt_flat_indices(gt: GtMatchSets, rows: int, cols: int, slack_row: int, slack_col: int,
                    offset: int = 0, stride_cols: Optional[int] = None) -> NDArray[np.int64]:
    """Flat positions of the entries the refinement loss reads, in one matrix."""
    stride = (cols + 1) if stride_cols is None else stride_cols
    m = gt.matches
    if (m.size and (m[:, 0].max() >= rows or m[:, 1].max() >= cols)) or \
            (gt.unmatched_x.size and gt.unmatched_x.max() >= rows) or \
            (gt.unmatched_y.size and gt.unmatched_y.max() >= cols):
        raise InvalidInputError("ground-truth index out of range for the confidence matrix")
    parts = [m[:, 0] * stride + m[:, 1],
             gt.unmatched_x * stride + slack_col,
             slack_row * stride + gt.unmatched_y]
    return offset + np.concatenate(parts).astype(np.int64)


def _floored_neg_sum(log_z: Tensor, flat: NDArray[np.int64]) -> Tensor:
    vals = dc.gather(log_z, flat)
    keep = vals.data > LOG_FLOOR
    floored = dc.mul(vals, dc.constant(keep.astype(float))) + dc.constant(np.where(keep, 0.0, LOG_FLOOR))
    return dc.neg(dc.sum(floored))


def fine_nll_loss(Z, gt: GtMatchSets) -> Tensor:
    """Negative log-likelihood of one ``(m + 1) x (n + 1)`` confidence matrix.

    ``Z`` is a ``ConfidenceMatrix``, a tensor of log-confidences, or an
    array of confidences.
    """
    if hasattr(Z, "log_values"):
        log_z = Tensor(Z.log_values)
    elif isinstance(Z, Tensor):
        log_z = Z
    else:
        with np.errstate(divide="ignore"):
            log_z = Tensor(np.maximum(np.log(np.asarray(Z, dtype=np.float64)), LOG_FLOOR))
    rows, cols = log_z.shape[0] - 1, log_z.shape[1] - 1
    return _floored_neg_sum(log_z, gt_flat_indices(gt, rows, cols, rows, cols))


def fine_nll_loss_batch(log_z: Tensor, gts: Sequence[GtMatchSets]) -> Tensor:
    """Mean refinement loss over a padded ``(G, M + 1, N + 1)`` batch (slack last)."""
    G, M1, N1 = log_z.shape
    if len(gts) != G:
        raise InvalidInputError("one ground-truth set per group is required")
    flat = np.concatenate([gt_flat_indices(gt, M1 - 1, N1 - 1, M1 - 1, N1 - 1, g * M1 * N1, N1)
                           for g, gt in enumerate(gts)])
    return dc.mul_scalar(_floored_neg_sum(log_z, flat), 1.0 / G)


def total_loss(coarse_loss, fine_loss, lam: float = 1.0):
    if isinstance(coarse_loss, Tensor) or isinstance(fine_loss, Tensor):
        return dc.as_tensor(coarse_loss) + dc.mul_scalar(dc.as_tensor(fine_loss), lam)
    return coarse_loss + lam * fine_loss
