"""Rotation-invariant point pair features and the signature sets built from them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidInputError
from .geom import NodeSet, PointCloud, SupportRegion

# Vectors shorter than this are treated as zero: the angle is defined as 0.
ZERO_NORM = 1e-12


class PpfQuadruple(NamedTuple):
    dist: float
    angle_nd1: float
    angle_nd2: float
    angle_nn: float


@dataclass(frozen=True)
class SignatureSet:
    owner_node: int
    quadruples: NDArray[np.float64]  # (k, 4)
    kind: str  # "local" | "global"

    def __len__(self) -> int:
        return self.quadruples.shape[0]


def angle_between(v1, v2):
    """atan2(|v1 x v2|, v1 . v2), vectorised over leading axes; 0 for near-zero vectors."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    cross = np.linalg.norm(np.cross(v1, v2), axis=-1)
    dot = np.sum(v1 * v2, axis=-1)
    ang = np.arctan2(cross, dot)
    zero = (np.linalg.norm(v1, axis=-1) < ZERO_NORM) | (np.linalg.norm(v2, axis=-1) < ZERO_NORM)
    ang = np.where(zero, 0.0, ang)
    return float(ang) if np.ndim(ang) == 0 else ang


def ppf_batch(x, n, x_ref, n_ref) -> NDArray[np.float64]:
    """PPF rows ``(|d|, ∠(n_ref, d), ∠(n, d), ∠(n_ref, n))`` with ``d = x - x_ref``.

    All inputs broadcast against each other over leading axes; the result has
    a trailing axis of length 4.
    """
    x, n, x_ref, n_ref = (np.asarray(a, dtype=np.float64) for a in (x, n, x_ref, n_ref))
    d = x - x_ref
    dist = np.linalg.norm(d, axis=-1)
    a1 = angle_between(n_ref, d)
    a2 = angle_between(n, d)
    a3 = angle_between(n_ref, n)
    return np.stack(np.broadcast_arrays(dist, a1, a2, a3), axis=-1)


def ppf(x, n, x_ref, n_ref) -> PpfQuadruple:
    return PpfQuadruple(*(float(v) for v in ppf_batch(x, n, x_ref, n_ref)))


def _require_normals(cloud: PointCloud):
    if cloud.normals is None:
        raise InvalidInputError("cloud has no normals; run estimate_normals first")


def local_signature(cloud: PointCloud, region: SupportRegion) -> SignatureSet:
    """One PPF per support member relative to the region's node, in member order."""
    _require_normals(cloud)
    i = region.node_index
    m = region.member_indices
    q = ppf_batch(cloud.points[m], cloud.normals[m], cloud.points[i], cloud.normals[i])
    return SignatureSet(i, q.reshape(-1, 4), "local")


def global_signature(cloud: PointCloud, nodes: NodeSet, i: int) -> SignatureSet:
    """PPFs of every other node relative to node position ``i``, ordered by position."""
    _require_normals(cloud)
    if nodes.count < 2:
        raise InvalidInputError("a global signature needs at least two nodes")
    idx = nodes.indices
    others = np.delete(idx, i)
    q = ppf_batch(cloud.points[others], cloud.normals[others],
                  cloud.points[idx[i]], cloud.normals[idx[i]])
    return SignatureSet(int(idx[i]), q, "global")


def global_signatures_array(cloud: PointCloud, nodes: NodeSet) -> NDArray[np.float64]:
    """All global signatures at once, shape ``(N', N'-1, 4)``."""
    _require_normals(cloud)
    if nodes.count < 2:
        raise InvalidInputError("a global signature needs at least two nodes")
    p = cloud.points[nodes.indices]
    nrm = cloud.normals[nodes.indices]
    full = ppf_batch(p[None, :, :], nrm[None, :, :], p[:, None, :], nrm[:, None, :])
    k = nodes.count
    off_diag = ~np.eye(k, dtype=bool)
    return full[off_diag].reshape(k, k - 1, 4)
