import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riga import diffcore as dc
from riga.diffcore import Parameter, Tensor
from riga.errors import InvalidInputError
from riga.geom import NodeSet, PointCloud, farthest_point_sampling, point_to_node_assign, vicinities
from riga.matcher import (CorrespondenceSet, InterpolationConfig, VicinityGroup, coarse_match, extract_fine,
                          group_vicinities, interpolate_dense, interpolation_weights, sinkhorn_log_batch,
                          sinkhorn_normalize)


def closed_form_p(s, alpha):
    """Fixed point of the 2x2 problem [[e^s, e^a], [e^a, e^a]] with unit marginals.

    With scalings u, v the balanced matrix is [[p, 1-p], [1-p, p]]; the
    cross-ratio p^2 / (1-p)^2 = e^(s - a) is invariant under scaling, so
    p = sigmoid((s - a) / 2).
    """
    return 1.0 / (1.0 + np.exp(-(s - alpha) / 2.0))


def brute_argmax_union(Z):
    m, n = Z.shape[0] - 1, Z.shape[1] - 1
    out = set()
    for u in range(m):
        v = max(range(n + 1), key=lambda j: (Z[u, j], -j))
        if v < n:
            out.add((u, v))
    for v in range(n):
        u = max(range(m + 1), key=lambda i: (Z[i, v], -i))
        if u < m:
            out.add((u, v))
    return out


class TestInterpolation:
    def test_equidistant(self):
        nodes = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        _, w = interpolation_weights(np.zeros((1, 3)), nodes)
        np.testing.assert_allclose(w, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_two_nodes(self):
        _, w = interpolation_weights(np.zeros((1, 3)), np.array([[1.0, 0, 0], [-2.0, 0, 0]]),
                                     InterpolationConfig(k=2))
        np.testing.assert_allclose(w, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_coincident_point_copies_node(self, rng):
        pts = rng.normal(size=(40, 3))
        cloud = PointCloud(pts)
        nodes = farthest_point_sampling(cloud, 8)
        descs = rng.normal(size=(8, 5))
        dense = interpolate_dense(cloud, nodes, descs).data
        np.testing.assert_array_equal(dense[nodes.indices], descs)

    def test_weights_sum_to_one(self, rng):
        _, w = interpolation_weights(rng.normal(size=(200, 3)), rng.normal(size=(12, 3)))
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)

    def test_k_clamped(self, rng):
        pos, w = interpolation_weights(rng.normal(size=(5, 3)), rng.normal(size=(2, 3)))
        assert pos.shape == (5, 2)


class TestCoarseMatch:
    def test_permutation_copy(self, rng):
        a = rng.normal(size=(10, 6))
        perm = rng.permutation(10)
        c = coarse_match(a, a[perm], top_k=10)
        assert set(c.pairs()) == {(int(perm[j]), j) for j in range(10)}

    def test_clamp(self, rng):
        assert len(coarse_match(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), 100)) == 6

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            a, b = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
            k = int(rng.integers(1, 400))
            sims = [(1.0 / np.linalg.norm(a[i] - b[j]), i, j) for i in range(20) for j in range(20)]
            sims.sort(key=lambda t: (-t[0], t[1], t[2]))
            assert coarse_match(a, b, k).pairs() == [(i, j) for _, i, j in sims[:k]]

    def test_ties_and_sentinel(self):
        a = np.zeros((2, 3))
        c = coarse_match(a, a.copy(), 4)
        assert c.pairs() == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert np.all(c.scores == 1e12)

    def test_scale_invariant_ranking(self, rng):
        a, b = rng.normal(size=(15, 4)), rng.normal(size=(12, 4))
        assert coarse_match(a, b, 50).pairs() == coarse_match(3.5 * a, 3.5 * b, 50).pairs()

    def test_top_k_minimum(self, rng):
        with pytest.raises(InvalidInputError):
            coarse_match(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), 0)


class TestGrouping:
    def test_nodes_are_points(self, rng):
        pts = rng.normal(size=(12, 3))
        cloud = PointCloud(pts)
        nodes = NodeSet(np.arange(12), 12)
        vic = vicinities(point_to_node_assign(cloud, nodes), 12)
        coarse = CorrespondenceSet(np.arange(12), np.arange(12), np.ones(12), "coarse")
        groups, skipped = group_vicinities(coarse, vic, vic, pts, pts, nodes.indices, nodes.indices, 4)
        assert skipped == 0
        assert all(g.members_x.tolist() == [g.node_x] for g in groups)

    def test_cap_and_order(self, rng):
        pts = rng.normal(size=(300, 3))
        cloud = PointCloud(pts)
        nodes = farthest_point_sampling(cloud, 6)
        vic = vicinities(point_to_node_assign(cloud, nodes), 6)
        assert sorted(np.concatenate(vic).tolist()) == list(range(300))
        coarse = coarse_match(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), 36)
        groups, _ = group_vicinities(coarse, vic, vic, pts, pts, nodes.indices, nodes.indices, 7)
        for g in groups:
            assert g.members_x.size <= 7
            d = np.linalg.norm(pts[g.members_x] - pts[nodes.indices[g.node_x]], axis=1)
            assert np.all(np.diff(d) >= 0)

    def test_empty_vicinity_skipped(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        vic = [np.array([0, 1]), np.array([], dtype=np.int64)]
        coarse = CorrespondenceSet([0, 1], [0, 0], [1.0, 0.5], "coarse")
        groups, skipped = group_vicinities(coarse, vic, vic, pts, pts, [0, 1], [0, 1], 5)
        assert len(groups) == 1 and skipped == 1

    def test_empty_coarse(self):
        with pytest.raises(InvalidInputError):
            group_vicinities(CorrespondenceSet.empty("coarse"), [], [], np.zeros((1, 3)), np.zeros((1, 3)),
                             [0], [0], 3)


class TestSinkhorn:
    @pytest.mark.parametrize("s,alpha", [(0.0, 1.0), (2.5, 1.0), (-3.0, 0.2), (1.7, -2.0)])
    def test_closed_form_2x2(self, s, alpha):
        Z = sinkhorn_normalize([[s]], alpha).values
        p = closed_form_p(s, alpha)
        np.testing.assert_allclose(Z, [[p, 1 - p], [1 - p, p]], atol=1e-8)

    def test_closed_form_wide_gap_needs_more_iterations(self):
        # the 2x2 error contracts by tanh((s - alpha) / 4)^2 per iteration, so a
        # gap of 8 is still ~2e-5 away after 100 iterations
        p = closed_form_p(7.0, -1.0)
        assert abs(sinkhorn_normalize([[7.0]], -1.0).values[0, 0] - p) > 1e-8
        np.testing.assert_allclose(sinkhorn_normalize([[7.0]], -1.0, 2000).values,
                                   [[p, 1 - p], [1 - p, p]], atol=1e-8)

    def test_constant_gives_uniform(self):
        Z = sinkhorn_normalize(np.full((4, 4), 0.7), 0.7).values
        np.testing.assert_allclose(Z, np.full((5, 5), 0.2), atol=1e-12)

    def test_doubly_stochastic_square(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            m = int(rng.integers(1, 65))
            Z = sinkhorn_normalize(rng.normal(size=(m, m)), rng.normal()).values
            assert np.all(Z >= 0)
            np.testing.assert_allclose(Z.sum(0), 1.0, atol=1e-6)
            np.testing.assert_allclose(Z.sum(1), 1.0, atol=1e-6)

    def test_large_logits_converge_with_more_iterations(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            m = int(rng.integers(1, 65))
            Z = sinkhorn_normalize(rng.normal(scale=3, size=(m, m)), rng.normal(), 1000).values
            np.testing.assert_allclose(Z.sum(0), 1.0, atol=1e-6)
            np.testing.assert_allclose(Z.sum(1), 1.0, atol=1e-6)

    def test_rectangular_marginals(self, rng):
        Z = sinkhorn_normalize(rng.normal(size=(3, 7)), 0.5).values
        np.testing.assert_allclose(Z[:3].sum(1), 1.0, atol=1e-6)
        np.testing.assert_allclose(Z[:, :7].sum(0), 1.0, atol=1e-6)
        assert Z[3].sum() == pytest.approx(5.0, abs=1e-6)

    def test_padded_batch_matches_single(self, rng):
        blocks = [rng.normal(size=(3, 5)), rng.normal(size=(6, 2))]
        batch = np.full((2, 6, 5), 123.0)
        batch[0, :3, :5], batch[1, :6, :2] = blocks
        log_z = sinkhorn_log_batch(Tensor(batch), 0.3, [3, 6], [5, 2], 100).data
        for g, (m, n) in enumerate([(3, 5), (6, 2)]):
            sub = log_z[g][np.r_[0:m, 6], :][:, np.r_[0:n, 5]]
            np.testing.assert_allclose(np.exp(sub), sinkhorn_normalize(blocks[g], 0.3).values, atol=1e-12)

    def test_gradient_through_slack(self, rng):
        S = Parameter(rng.normal(size=(1, 3, 3)), "S")
        alpha = Parameter(np.array([0.4]), "alpha")
        w = Tensor(rng.normal(size=(1, 4, 4)))
        fn = lambda: dc.sum(dc.mul(sinkhorn_log_batch(S, alpha, [3], [3], 100), w))  # noqa: E731
        assert dc.gradient_check(fn, [S, alpha]) < 1e-4


class TestExtractFine:
    def test_identity(self):
        Z = np.zeros((4, 4))
        Z[:3, :3] = np.eye(3)
        assert extract_fine(Z).pairs() == [(0, 0), (1, 1), (2, 2)]

    def test_slack_drops_row(self):
        Z = np.array([[0.1, 0.9], [0.9, 0.1]])
        assert len(extract_fine(Z)) == 0

    def test_group_mapping(self):
        Z = np.zeros((3, 3))
        Z[0, 1] = Z[1, 0] = 1.0
        g = VicinityGroup(0, 0, np.array([10, 11]), np.array([20, 21]))
        assert extract_fine(Z, g).pairs() == [(10, 21), (11, 20)]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            Z = rng.uniform(size=(9, 9))
            got = set(extract_fine(Z).pairs())
            assert got == brute_argmax_union(Z)
            mutual = set(extract_fine(Z, mode="mutual").pairs())
            assert mutual <= got

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
    def test_confidences_are_entries(self, m, n, seed):
        Z = np.random.default_rng(seed).uniform(size=(m + 1, n + 1))
        c = extract_fine(Z)
        np.testing.assert_array_equal(c.scores, Z[c.src, c.tgt])


class TestCorrespondenceSet:
    def test_union_keeps_max(self):
        a = CorrespondenceSet([0, 1], [0, 1], [0.2, 0.5])
        b = CorrespondenceSet([0], [0], [0.9])
        u = CorrespondenceSet.union([a, b])
        assert u.pairs() == [(0, 0), (1, 1)] and u.scores.tolist() == [0.9, 0.5]

    def test_top(self):
        c = CorrespondenceSet([0, 1, 2], [0, 1, 2], [0.1, 0.9, 0.5]).top(2)
        assert c.pairs() == [(1, 1), (2, 2)]
