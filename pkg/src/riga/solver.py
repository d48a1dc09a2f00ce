"""Closed-form weighted rigid alignment and a RANSAC wrapper around it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateGeometryError, InsufficientCorrespondencesError, InvalidInputError, \
    RegistrationFailedError
from .geom import RigidTransform
from .matcher import CorrespondenceSet

_RANK_TOL = 1e-12


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 5000
    inlier_threshold: float = 0.05
    sample_size: int = 3
    seed: int = 0
    weighted_refit: bool = True
    chunk: int = 512

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("iterations must be at least 1")
        if self.sample_size < 3:
            raise InvalidInputError("sample_size must be at least 3")
        if self.inlier_threshold <= 0:
            raise InvalidInputError("inlier_threshold must be positive")


@dataclass
class RansacResult:
    transform: RigidTransform
    inlier_indices: NDArray[np.int64]  # positions into the correspondence set
    inlier_count: int
    best_iteration: int


def _kabsch(x, y, w):
    """Batched weighted Kabsch on ``(B, n, 3)`` arrays; returns (R, t, rank_ok)."""
    wsum = w.sum(axis=1, keepdims=True)
    cx = (w[..., None] * x).sum(axis=1) / wsum
    cy = (w[..., None] * y).sum(axis=1) / wsum
    xc = x - cx[:, None, :]
    yc = y - cy[:, None, :]
    H = np.einsum("bn,bni,bnj->bij", w, xc, yc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, 1, 2) @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros((x.shape[0], 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.swapaxes(Vt, 1, 2) @ D @ np.swapaxes(U, 1, 2)
    t = cy - np.einsum("bij,bj->bi", R, cx)
    sv = np.linalg.svd(np.sqrt(w)[..., None] * xc, compute_uv=False)
    rank_ok = (sv[:, 0] > 0) & (sv[:, 1] > _RANK_TOL * np.maximum(sv[:, 0], 1.0))
    return R, t, rank_ok


def weighted_procrustes(x, y, weights=None) -> RigidTransform:
    """argmin over (R, t) of sum_i w_i |R x_i + t - y_i|^2, with det(R) = +1.

    Raises ``DegenerateGeometryError`` with fewer than three positively
    weighted pairs or when the weighted source points are collinear.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise InvalidInputError("x and y must have equal shape")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != x.shape[0] or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite, nonnegative and one per pair")
    if np.count_nonzero(w > 0) < 3:
        raise DegenerateGeometryError("need at least three positively weighted pairs")
    R, t, ok = _kabsch(x[None], y[None], w[None])
    if not ok[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    return RigidTransform(R[0], t[0])


def ransac_register(corr: CorrespondenceSet, src_points, tgt_points,
                    cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Hypothesise-and-verify over minimal samples, then refit on the inliers.

    Sampling uses ``numpy.random.default_rng(cfg.seed)``; samples containing
    a repeated index or collinear points are discarded. The best hypothesis
    is the one with most inliers, the earliest iteration winning ties.
    """
    n = len(corr)
    if n < 3:
        raise InsufficientCorrespondencesError(f"need at least 3 correspondences, got {n}")
    X = np.asarray(src_points, dtype=np.float64)[corr.src]
    Y = np.asarray(tgt_points, dtype=np.float64)[corr.tgt]
    rng = np.random.default_rng(cfg.seed)
    samples = rng.integers(0, n, size=(cfg.iterations, cfg.sample_size))
    ss = np.sort(samples, axis=1)
    distinct = np.all(ss[:, 1:] != ss[:, :-1], axis=1)

    best_count, best_iter, best_R, best_t = -1, -1, np.eye(3), np.zeros(3)
    thr2 = cfg.inlier_threshold ** 2
    for start in range(0, cfg.iterations, cfg.chunk):
        sl = slice(start, min(start + cfg.chunk, cfg.iterations))
        s = samples[sl]
        R, t, ok = _kabsch(X[s], Y[s], np.ones(s.shape))
        ok &= distinct[sl]
        pred = np.einsum("bij,nj->bni", R, X) + t[:, None, :]
        counts = (np.sum((pred - Y[None]) ** 2, axis=2) < thr2).sum(axis=1)
        counts = np.where(ok, counts, -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_iter = int(counts[k]), start + k
            best_R, best_t = R[k], t[k]

    inliers = np.flatnonzero(np.sum((X @ best_R.T + best_t - Y) ** 2, axis=1) < thr2)
    best = RansacResult(RigidTransform.from_matrix(_homog(best_R, best_t), orthonormalize=True),
                        inliers, int(inliers.size), best_iter)
    if inliers.size < 3:
        raise RegistrationFailedError("no hypothesis reached three inliers", best)
    w = corr.scores[inliers] if cfg.weighted_refit else np.ones(inliers.size)
    if not np.any(w > 0):
        w = np.ones(inliers.size)
    try:
        best.transform = weighted_procrustes(X[inliers], Y[inliers], w)
    except DegenerateGeometryError:
        pass  # keep the minimal-sample hypothesis
    return best


def _homog(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M
