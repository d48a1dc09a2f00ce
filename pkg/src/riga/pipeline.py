"""End-to-end wiring: frame preparation, the descriptor forward pass, coarse-to-fine
matching, registration and the per-pair training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import diffcore as dc
from .attention import run_stack
from .diffcore import Tensor
from .encoders import Descriptor, ModelConfig, Params, encode_sets, inform_descriptor, pack_sets, \
    project_descriptor
from .errors import InvalidInputError
from .geom import NodeSet, PointCloud, RigidTransform, apply_transform, estimate_normals, \
    farthest_point_sampling, point_to_node_assign, support_regions, vicinities
from .losses import LossConfig, build_gt_sets, circle_loss, fine_nll_loss_batch, overlap_ratio_matrix, \
    total_loss
from .matcher import CorrespondenceSet, InterpolationConfig, VicinityGroup, coarse_match, extract_fine, \
    group_vicinities, interpolation_matrix, sinkhorn_log_batch, truncated_vicinity
from .ppf import global_signatures_array, ppf_batch
from .solver import RansacConfig, RansacResult, ransac_register

LOCAL_FEATURES = ("ppf", "xyz")


@dataclass(frozen=True)
class PipelineConfig:
    n_nodes: int = 256
    support_radius: float = 0.2
    support_max: int = 64
    vicinity_max: int = 32
    normal_k: int = 16
    top_k: int = 256
    sinkhorn_iters: int = 100
    interp: InterpolationConfig = field(default_factory=InterpolationConfig)
    extract_mode: str = "row_and_col_argmax"
    # "xyz" swaps the local PPFs for node-relative coordinates (rotation-variant ablation)
    local_features: str = "ppf"

    def __post_init__(self):
        if self.local_features not in LOCAL_FEATURES:
            raise InvalidInputError(f"local_features must be one of {LOCAL_FEATURES}")
        if min(self.n_nodes, self.support_max, self.vicinity_max, self.top_k, self.sinkhorn_iters) < 1:
            raise InvalidInputError("counts in PipelineConfig must be positive")
        if self.support_radius <= 0:
            raise InvalidInputError("support_radius must be positive")


@dataclass
class Frame:
    """Everything about one cloud that does not depend on the learned weights."""

    cloud: PointCloud
    nodes: NodeSet
    local_packed: NDArray[np.float64]  # (N', S, 4)
    local_mask: NDArray[np.bool_]
    global_sets: NDArray[np.float64]  # (N', N'-1, 4)
    assignment: NDArray[np.int64]  # node position per point
    vicinities: list
    interp: NDArray[np.float64]  # (N, N') dense interpolation weights

    @property
    def node_points(self) -> NDArray[np.float64]:
        return self.cloud.points[self.nodes.indices]


def _xyz_local(cloud: PointCloud, node: int, members) -> NDArray[np.float64]:
    d = cloud.points[members] - cloud.points[node]
    return np.hstack([d, np.linalg.norm(d, axis=1, keepdims=True)])


def _packed_local_ppfs(cloud: PointCloud, regions):
    """Local PPF sets for all regions in one batched call, laid out as ``pack_sets`` would."""
    sizes = np.array([r.member_indices.size for r in regions])
    if np.any(sizes == 0):
        raise InvalidInputError("cannot encode an empty signature")
    mask = np.arange(sizes.max())[None, :] < sizes[:, None]
    members = np.zeros(mask.shape, dtype=np.int64)
    members[mask] = np.concatenate([r.member_indices for r in regions])
    centre = np.array([r.node_index for r in regions])[:, None]
    q = ppf_batch(cloud.points[members], cloud.normals[members], cloud.points[centre], cloud.normals[centre])
    return np.where(mask[:, :, None], q, 0.0), mask


def prepare_frame(cloud: PointCloud, cfg: PipelineConfig = PipelineConfig()) -> Frame:
    """Normals (if missing), nodes, support regions, signatures, vicinities and interpolation."""
    if cloud.normals is None:
        cloud = estimate_normals(cloud, cfg.normal_k)
    nodes = farthest_point_sampling(cloud, cfg.n_nodes)
    if nodes.count < 2:
        raise InvalidInputError("need at least two nodes")
    regions = support_regions(cloud, nodes, cfg.support_radius, cfg.support_max)
    if cfg.local_features == "ppf":
        packed, mask = _packed_local_ppfs(cloud, regions)
    else:
        packed, mask = pack_sets([_xyz_local(cloud, r.node_index, r.member_indices) for r in regions], 4)
    assignment = point_to_node_assign(cloud, nodes)
    return Frame(cloud, nodes, packed, mask, global_signatures_array(cloud, nodes), assignment,
                 vicinities(assignment, nodes.count), interpolation_matrix(cloud, nodes, cfg.interp))


@dataclass
class FrameDescriptors:
    geometric: Tensor
    structural: Tensor
    informed: Tensor
    aware: Tensor
    node_proj: Tensor
    point_proj: Tensor

    def stages(self) -> dict:
        return {"g": self.geometric, "s": self.structural, "d0": self.informed,
                "d_tilde": self.aware, "d_hat_node": self.node_proj, "d_hat_point": self.point_proj}


def _encode_frame(frame: Frame, params: Params, mcfg: ModelConfig):
    g = Descriptor(encode_sets(frame.local_packed, frame.local_mask, params, "psi_g", mcfg), "geometric")
    glob = frame.global_sets
    s = Descriptor(encode_sets(glob, np.ones(glob.shape[:2], bool), params, "psi_s", mcfg), "structural")
    return g, s, inform_descriptor(g, s)


def describe_pair(fx: Frame, fy: Frame, params: Params, mcfg: ModelConfig, encoded_y=None):
    """Forward pass for both frames; returns ``(FrameDescriptors, FrameDescriptors)``.

    ``encoded_y`` may carry a previous ``_encode_frame(fy, ...)`` result, which
    depends on ``fy`` alone and can be reused when only ``fx`` changes.
    """
    gx, sx, dx = _encode_frame(fx, params, mcfg)
    gy, sy, dy = encoded_y if encoded_y is not None else _encode_frame(fy, params, mcfg)
    ax, ay = run_stack(dx, dy, params, mcfg)
    out = []
    for f, g, s, d, a in ((fx, gx, sx, dx, ax), (fy, gy, sy, dy, ay)):
        node_proj = project_descriptor(a, params, "c")
        dense = Descriptor(dc.matmul(dc.constant(f.interp), a.values), "aware")
        point_proj = project_descriptor(dense, params, "f")
        out.append(FrameDescriptors(g.values, s.values, d.values, a.values, node_proj.values,
                                    point_proj.values))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def _group_scores(groups, px: Tensor, py: Tensor):
    """Padded ``(G, M, N)`` similarity batch ``D_x D_y^T`` for a list of groups."""
    M = max(g.members_x.size for g in groups)
    N = max(g.members_y.size for g in groups)
    ix = np.zeros((len(groups), M), dtype=np.int64)
    iy = np.zeros((len(groups), N), dtype=np.int64)
    for k, g in enumerate(groups):
        ix[k, : g.members_x.size] = g.members_x
        iy[k, : g.members_y.size] = g.members_y
    c = px.shape[1]
    dx = dc.reshape(dc.take(px, ix.reshape(-1)), (len(groups), M, c))
    dy = dc.reshape(dc.take(py, iy.reshape(-1)), (len(groups), N, c))
    rows = [g.members_x.size for g in groups]
    cols = [g.members_y.size for g in groups]
    return dc.matmul(dx, dc.transpose(dy, (0, 2, 1))), rows, cols


@dataclass
class MatchResult:
    correspondences: CorrespondenceSet
    coarse: CorrespondenceSet
    groups_used: int
    skipped_groups: int


def match_frames(fx: Frame, fy: Frame, dx: FrameDescriptors, dy: FrameDescriptors,
                 params: Params, cfg: PipelineConfig) -> MatchResult:
    coarse = coarse_match(dx.node_proj.data, dy.node_proj.data, cfg.top_k)
    groups, skipped = group_vicinities(coarse, fx.vicinities, fy.vicinities, fx.cloud.points,
                                       fy.cloud.points, fx.nodes.indices, fy.nodes.indices,
                                       cfg.vicinity_max)
    if not groups:
        return MatchResult(CorrespondenceSet.empty(), coarse, 0, skipped)
    px, py = Tensor(dx.point_proj.data), Tensor(dy.point_proj.data)
    alpha = params["slack.alpha"].data
    # batch groups of similar size together so small vicinities are not padded to the largest
    size = [max(g.members_x.size, g.members_y.size) for g in groups]
    bucket = [int(np.ceil(np.log2(s))) for s in size]
    parts = [None] * len(groups)
    for b in sorted(set(bucket)):
        members = [k for k in range(len(groups)) if bucket[k] == b]
        batch = [groups[k] for k in members]
        with dc.no_grad():
            scores, rows, cols = _group_scores(batch, px, py)
            log_z = sinkhorn_log_batch(scores, alpha, rows, cols, cfg.sinkhorn_iters).data
        M, N = scores.shape[1], scores.shape[2]
        for k, g, z, m, n in zip(members, batch, log_z, rows, cols):
            sub = np.exp(z[np.r_[0:m, M], :][:, np.r_[0:n, N]])
            parts[k] = extract_fine(sub, g, cfg.extract_mode)
    return MatchResult(CorrespondenceSet.union(parts), coarse, len(groups), skipped)


def match_pair(source: PointCloud, target: PointCloud, params: Params, mcfg: ModelConfig = ModelConfig(),
               cfg: PipelineConfig = PipelineConfig()) -> MatchResult:
    """Clouds to fine correspondences (source indices, target indices)."""
    fx, fy = prepare_frame(source, cfg), prepare_frame(target, cfg)
    with dc.no_grad():
        dx, dy = describe_pair(fx, fy, params, mcfg)
    return match_frames(fx, fy, dx, dy, params, cfg)


@dataclass
class RegistrationOutcome:
    transform: RigidTransform
    correspondences: CorrespondenceSet
    ransac: RansacResult
    match: MatchResult
    runtime_s: float
    metadata: dict = field(default_factory=dict)


def register_pair(source: PointCloud, target: PointCloud, params: Params, mcfg: ModelConfig,
                  cfg: PipelineConfig, rcfg: RansacConfig = RansacConfig(),
                  num_corr: Optional[int] = None) -> RegistrationOutcome:
    """Match, keep the ``num_corr`` most confident pairs, then run RANSAC.

    Raises the solver's errors when too few correspondences survive or no
    hypothesis gathers three inliers.
    """
    start = time.perf_counter()
    fx, fy = prepare_frame(source, cfg), prepare_frame(target, cfg)
    with dc.no_grad():
        dx, dy = describe_pair(fx, fy, params, mcfg)
    match = match_frames(fx, fy, dx, dy, params, cfg)
    corr = match.correspondences if num_corr is None else match.correspondences.top(num_corr)
    res = ransac_register(corr, fx.cloud.points, fy.cloud.points, rcfg)
    return RegistrationOutcome(res.transform, corr, res, match, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

@dataclass
class PairLoss:
    total: Tensor
    coarse: Tensor
    fine: Tensor
    coarse_skipped: bool
    groups: int


def sample_training_groups(fx: Frame, fy: Frame, ratios, cfg: PipelineConfig, lcfg: LossConfig,
                           rng: np.random.Generator) -> list[VicinityGroup]:
    """Uniformly sample up to ``lcfg.train_coarse`` overlapping node pairs as vicinity groups."""
    ii, jj = np.nonzero(ratios > 0)
    if ii.size == 0:
        return []
    pick = np.sort(rng.choice(ii.size, size=min(lcfg.train_coarse, ii.size), replace=False))
    groups = []
    for i, j in zip(ii[pick], jj[pick]):
        mx = truncated_vicinity(fx.vicinities[i], fx.cloud.points, fx.node_points[i], cfg.vicinity_max)
        my = truncated_vicinity(fy.vicinities[j], fy.cloud.points, fy.node_points[j], cfg.vicinity_max)
        if mx.size and my.size:
            groups.append(VicinityGroup(int(i), int(j), mx, my))
    return groups


def _anchor_sample(n: int, count: int, rng) -> NDArray[np.int64]:
    if count >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=count, replace=False))


def pair_loss(fx: Frame, fy: Frame, T_gt: RigidTransform, params: Params, mcfg: ModelConfig,
              cfg: PipelineConfig, lcfg: LossConfig, rng: np.random.Generator) -> PairLoss:
    """Total loss L_c + lam * L_f for one training pair (``T_gt`` maps x onto y)."""
    ratios, _, _ = overlap_ratio_matrix(fx.cloud.points, fy.cloud.points, fx.assignment, fy.assignment,
                                        fx.nodes.count, fy.nodes.count, T_gt, lcfg.tau_p)
    dx, dy = describe_pair(fx, fy, params, mcfg)
    ax = _anchor_sample(fx.nodes.count, lcfg.anchors_per_frame, rng)
    ay = _anchor_sample(fy.nodes.count, lcfg.anchors_per_frame, rng)
    coarse, skipped = circle_loss(dx.node_proj, dy.node_proj, ratios, lcfg, ax, ay)

    groups = sample_training_groups(fx, fy, ratios, cfg, lcfg, rng)
    if groups:
        scores, rows, cols = _group_scores(groups, dx.point_proj, dy.point_proj)
        log_z = sinkhorn_log_batch(scores, params["slack.alpha"], rows, cols, cfg.sinkhorn_iters)
        # slack sits at the last row/column of each padded block, which is what
        # fine_nll_loss_batch addresses
        gts = [build_gt_sets(fx.cloud.points[g.members_x], fy.cloud.points[g.members_y], T_gt, lcfg.tau_p)
               for g in groups]
        fine = fine_nll_loss_batch(log_z, gts)
    else:
        fine = Tensor(0.0)
    return PairLoss(total_loss(coarse, fine, lcfg.lam), coarse, fine, skipped, len(groups))


# ---------------------------------------------------------------------------
# invariance probe
# ---------------------------------------------------------------------------

def transform_cloud(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return apply_transform(T, cloud)


def invariance_sweep(cloud: PointCloud, partner: PointCloud, transforms, params: Params,
                     mcfg: ModelConfig, cfg: PipelineConfig):
    """Per-stage max abs descriptor deviation and fine-correspondence index diff
    for each rigid motion of ``cloud`` in ``transforms`` (``partner`` stays fixed).

    The unmoved frames and their descriptors are computed once and shared.
    Returns a list of ``(deviations, index_diff)``.
    """
    base_x, base_y = prepare_frame(cloud, cfg), prepare_frame(partner, cfg)
    with dc.no_grad():
        enc_y = _encode_frame(base_y, params, mcfg)
        d0x, d0y = describe_pair(base_x, base_y, params, mcfg, enc_y)
    ref = set(match_frames(base_x, base_y, d0x, d0y, params, cfg).correspondences.pairs())
    results = []
    for T in transforms:
        moved_x = prepare_frame(transform_cloud(base_x.cloud, T), cfg)
        with dc.no_grad():
            d1x, d1y = describe_pair(moved_x, base_y, params, mcfg, enc_y)
        dev = {}
        for before, after in ((d0x, d1x), (d0y, d1y)):
            for (k, a), b in zip(before.stages().items(), after.stages().values()):
                dev[k] = max(dev.get(k, 0.0), float(np.max(np.abs(a.data - b.data))))
        moved = set(match_frames(moved_x, base_y, d1x, d1y, params, cfg).correspondences.pairs())
        results.append((dev, len(ref ^ moved)))
    return results


def invariance_probe(cloud: PointCloud, partner: PointCloud, T: RigidTransform, params: Params,
                     mcfg: ModelConfig, cfg: PipelineConfig):
    """Single-motion form of :func:`invariance_sweep`; returns ``(deviations, index_diff)``."""
    return invariance_sweep(cloud, partner, [T], params, mcfg, cfg)[0]
