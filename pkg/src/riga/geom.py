"""Point clouds, rigid transforms and the neighbourhood machinery.

Every query that backs onto a k-d tree recomputes candidate distances with
the same expression the brute-force oracles use, and sorts by
``(distance, index)``; results are therefore identical to an exhaustive scan
and independent of the tree's internal visiting order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometryError, InvalidInputError

ORIENTATIONS = ("toward_viewpoint", "away_from_centroid")


def _as_points(x, name="points") -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


@dataclass
class PointCloud:
    """Points with optional unit normals and an optional sensor viewpoint."""

    points: NDArray[np.float64]
    normals: Optional[NDArray[np.float64]] = None
    viewpoint: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        self.points = _as_points(self.points)
        if self.points.shape[0] < 1:
            raise InvalidInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise InvalidInputError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = _as_points(self.normals, "normals")
            if self.normals.shape != self.points.shape:
                raise InvalidInputError("points and normals must have equal length")
            if not np.all(np.isfinite(self.normals)):
                raise InvalidInputError("normals must be finite")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise InvalidInputError("normals must have unit length (tolerance 1e-9)")
        if self.viewpoint is not None:
            self.viewpoint = np.asarray(self.viewpoint, dtype=np.float64).reshape(3)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals, self.viewpoint)


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation`` with ``rotation`` in SO(3)."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not in SO(3) within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix, orthonormalize: bool = False) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix.

        ``orthonormalize`` projects the rotation block onto SO(3) first, which
        is useful for matrices read back from text with limited precision.
        """
        M = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if not np.all(np.isfinite(M)):
            raise InvalidInputError("transform entries must be finite")
        R = M[:3, :3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
            R = U @ D @ Vt
        return cls(R, M[:3, 3])

    @classmethod
    def random(cls, rng: np.random.Generator, trans_range: float = 0.0) -> "RigidTransform":
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.uniform(-trans_range, trans_range, size=3) if trans_range > 0 else np.zeros(3)
        return cls(R, t)

    def as_matrix(self) -> NDArray[np.float64]:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> NDArray[np.float64]:
        return _as_points(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class NodeSet:
    """Sparse nodes chosen by farthest point sampling, in selection order."""

    indices: NDArray[np.int64]
    requested: int

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])

    @property
    def clamped(self) -> bool:
        return self.requested > self.count

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True)
class SupportRegion:
    node_index: int
    member_indices: NDArray[np.int64]


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    points = cloud.points @ T.rotation.T + T.translation
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    viewpoint = None if cloud.viewpoint is None else T.rotation @ cloud.viewpoint + T.translation
    return PointCloud(points, normals, viewpoint)


def _sorted_by_distance(candidates: NDArray[np.int64], dists: NDArray[np.float64]):
    order = np.lexsort((candidates, dists))
    return candidates[order], dists[order]


def estimate_normals(cloud: PointCloud, k_neighbors: int = 16,
                     orientation: str = "toward_viewpoint") -> PointCloud:
    """PCA normals from the covariance of each point and its k nearest neighbours.

    The normal is the eigenvector of the smallest covariance eigenvalue. Its
    sign is chosen so that it faces the viewpoint (when ``orientation`` is
    ``"toward_viewpoint"`` and the cloud has one) or points away from the
    cloud centroid otherwise. A zero dot product keeps the solver's sign.
    """
    if orientation not in ORIENTATIONS:
        raise InvalidInputError(f"unknown orientation {orientation!r}")
    if k_neighbors < 2:
        raise InvalidInputError("k_neighbors must be at least 2")
    pts = cloud.points
    n = pts.shape[0]
    if n < k_neighbors + 1:
        raise InvalidInputError(f"need at least {k_neighbors + 1} points, got {n}")

    _, nbr = cKDTree(pts).query(pts, k=k_neighbors + 1)
    neigh = pts[nbr]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k_neighbors + 1)
    scale = np.trace(cov, axis1=1, axis2=2)
    if np.any(scale <= 1e-300):
        raise DegenerateGeometryError("neighbourhood covariance is zero (coincident points)")
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    if orientation == "toward_viewpoint" and cloud.viewpoint is not None:
        ref = cloud.viewpoint[None, :] - pts
    else:
        ref = pts - pts.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1.0
    return PointCloud(pts, normals, cloud.viewpoint)


def farthest_point_sampling(cloud: PointCloud, n_nodes: int, start_index: int = 0) -> NodeSet:
    """Greedy max-min sampling; ties go to the smallest point index.

    Requests beyond the cloud size are clamped, which ``NodeSet.clamped``
    reports.
    """
    pts = cloud.points
    n = pts.shape[0]
    if n_nodes < 1:
        raise InvalidInputError("n_nodes must be positive")
    if not 0 <= start_index < n:
        raise InvalidInputError(f"start_index {start_index} out of range")
    count = min(n_nodes, n)
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start_index
    min_d2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    min_d2[start_index] = -1.0
    for s in range(1, count):
        nxt = int(np.argmax(min_d2))  # argmax returns the first maximum
        selected[s] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[selected[: s + 1]] = -1.0
    return NodeSet(selected, n_nodes)


def _exact_dist(pts, idx, center):
    return np.sqrt(np.sum((pts[idx] - center) ** 2, axis=1))


def radius_neighbors(cloud: PointCloud, center, r: float, max_count: int,
                     tree: Optional[cKDTree] = None) -> NDArray[np.int64]:
    """Indices with distance strictly below ``r``, nearest first, capped at ``max_count``."""
    if r <= 0:
        raise InvalidInputError("radius must be positive")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    tree = tree if tree is not None else cKDTree(cloud.points)
    cand = np.asarray(tree.query_ball_point(c, r * (1 + 1e-9) + 1e-12), dtype=np.int64)
    if cand.size == 0:
        return cand
    d = _exact_dist(cloud.points, cand, c)
    keep = d < r
    idx, _ = _sorted_by_distance(cand[keep], d[keep])
    return idx[:max_count]


def support_regions(cloud: PointCloud, nodes: NodeSet, r: float, max_count: int) -> list[SupportRegion]:
    tree = cKDTree(cloud.points)
    return [SupportRegion(int(i), radius_neighbors(cloud, cloud.points[i], r, max_count, tree))
            for i in nodes.indices]


def nearest_nodes(points, node_points, k: int):
    """k nearest nodes per point as ``(positions, distances)``, sorted by (distance, position)."""
    points = _as_points(points)
    node_points = _as_points(node_points, "node points")
    m = node_points.shape[0]
    k = min(k, m)
    # over-fetch one candidate; if it ties with the k-th, more tied nodes may
    # hide behind it, so that row is redone with an exact ball query
    tree = cKDTree(node_points)
    q = min(k + 1, m)
    _, cand = tree.query(points, k=q)
    cand = np.asarray(cand, dtype=np.int64).reshape(points.shape[0], q)
    d = np.sqrt(np.sum((node_points[cand] - points[:, None, :]) ** 2, axis=2))
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    out_c, out_d = cand[:, :k].copy(), d[:, :k].copy()
    if q > k:
        kth, extra = d[:, k - 1], d[:, k]
        for i in np.flatnonzero(extra <= kth * (1 + 1e-9) + 1e-12):
            ball = np.asarray(tree.query_ball_point(points[i], kth[i] * (1 + 1e-9) + 1e-12), dtype=np.int64)
            bd = _exact_dist(node_points, ball, points[i])
            sel = np.lexsort((ball, bd))[:k]
            out_c[i], out_d[i] = ball[sel], bd[sel]
    return out_c, out_d


def point_to_node_assign(cloud: PointCloud, nodes: NodeSet) -> NDArray[np.int64]:
    """Node position (into ``nodes.indices``) of the nearest node for every point."""
    if nodes.count < 1:
        raise InvalidInputError("node set is empty")
    pos, _ = nearest_nodes(cloud.points, cloud.points[nodes.indices], 1)
    return pos[:, 0]


def vicinities(assignment: NDArray[np.int64], n_nodes: int) -> list[NDArray[np.int64]]:
    """Partition point indices by assigned node position."""
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(n_nodes + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n_nodes)]
