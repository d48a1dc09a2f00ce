"""Registration and correspondence metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .geom import RigidTransform


@dataclass(frozen=True)
class MetricThresholds:
    tau1: float = 0.10  # inlier distance
    tau2: float = 0.05  # feature matching recall cutoff on the inlier ratio
    tau3: float = 0.20  # registration recall cutoff on RMSE

    def __post_init__(self):
        if min(self.tau1, self.tau2, self.tau3) <= 0:
            raise InvalidInputError("metric thresholds must be positive")


def rre(T_est: RigidTransform, T_gt: RigidTransform) -> float:
    """Relative rotation error in degrees.

    Evaluates arccos((trace(R_gt^T R_est) - 1) / 2) through the equivalent
    atan2(sin, cos) form, which keeps full precision near 0 and 180 degrees.
    """
    M = T_gt.rotation.T @ T_est.rotation
    cos = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    axis = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin = 0.5 * np.linalg.norm(axis)
    return float(np.degrees(np.arctan2(sin, cos)))


def rre_arccos(T_est: RigidTransform, T_gt: RigidTransform) -> float:
    """The arccos form taken literally, clamped to [-1, 1]."""
    c = (np.trace(T_gt.rotation.T @ T_est.rotation) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rte(T_est: RigidTransform, T_gt: RigidTransform) -> float:
    return float(np.linalg.norm(T_gt.translation - T_est.translation))


def rmse1(points, T_est: RigidTransform, T_gt: RigidTransform, conventional: bool = False) -> float:
    """(1/|X|) * sqrt(sum |T_est(x) - T_gt(x)|^2).

    The square root is divided by |X| as written in the metric's original
    definition; ``conventional=True`` gives sqrt(mean(...)) instead.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("rmse1 needs a nonempty cloud")
    sq = np.sum((T_est.apply(pts) - T_gt.apply(pts)) ** 2)
    if conventional:
        return float(np.sqrt(sq / len(pts)))
    return float(np.sqrt(sq) / len(pts))


def rmse2(src_points, tgt_points, T_est: RigidTransform) -> float:
    """RMS residual of ground-truth correspondences ``(src_points[i], tgt_points[i])``."""
    x = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise InvalidInputError("rmse2 needs a nonempty correspondence set")
    if x.shape != y.shape:
        raise InvalidInputError("correspondence arrays must match")
    return float(np.sqrt(np.mean(np.sum((T_est.apply(x) - y) ** 2, axis=1))))


def inlier_ratio(src_points, tgt_points, T_gt: RigidTransform, tau1: float = 0.10) -> float:
    """Fraction of putative pairs with |T_gt(x) - y| < tau1."""
    x = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise InvalidInputError("inlier ratio needs a nonempty correspondence set")
    res = np.sqrt(np.sum((T_gt.apply(x) - y) ** 2, axis=1))
    return float(np.mean(res < tau1))


def fmr(inlier_ratios, tau2: float = 0.05) -> float:
    ir = np.asarray(inlier_ratios, dtype=np.float64).reshape(-1)
    if ir.size == 0:
        raise InvalidInputError("feature matching recall needs at least one pair")
    return float(np.mean(ir > tau2))


def registration_recall(rmses, tau3: float = 0.20) -> float:
    r = np.asarray(rmses, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise InvalidInputError("registration recall needs at least one pair")
    return float(np.mean(r < tau3))


rr = registration_recall


def ground_truth_correspondences(src_points, tgt_points, T_gt: RigidTransform, tau: float):
    """Pairs (u, nearest v) whose residual under ``T_gt`` is below ``tau``.

    Used as the ground-truth set for ``rmse2`` when none is supplied.
    """
    x = T_gt.apply(src_points)
    d, v = cKDTree(np.asarray(tgt_points, dtype=np.float64)).query(x, k=1)
    u = np.flatnonzero(d < tau)
    return u, np.asarray(v, dtype=np.int64)[u]
