import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from riga.errors import InvalidInputError
from riga.geom import (NodeSet, PointCloud, RigidTransform, SupportRegion, apply_transform,
                       estimate_normals, farthest_point_sampling, support_regions)
from riga.ppf import angle_between, global_signature, global_signatures_array, local_signature, ppf, \
    ppf_batch

finite = st.floats(-10, 10, allow_nan=False)


def unit(v):
    return v / np.linalg.norm(v)


class TestAngleBetween:
    @pytest.mark.parametrize("v1,v2,expected", [
        ((1, 0, 0), (0, 1, 0), np.pi / 2),
        ((1, 0, 0), (2, 0, 0), 0.0),
        ((1, 0, 0), (-1, 0, 0), np.pi),
        ((0, 0, 0), (1, 0, 0), 0.0),
    ])
    def test_examples(self, v1, v2, expected):
        assert angle_between(v1, v2) == pytest.approx(expected, abs=1e-15)

    @settings(max_examples=200)
    @given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite))
    def test_range_and_sign_flip(self, v1, v2):
        a = angle_between(v1, v2)
        assert 0.0 <= a <= np.pi
        if np.linalg.norm(v1) > 1e-6 and np.linalg.norm(v2) > 1e-6:
            assert angle_between(v1, -v2) == pytest.approx(np.pi - a, abs=1e-9)


class TestPpf:
    def test_parallel(self):
        assert ppf([0, 0, 1], [0, 0, 1], [0, 0, 0], [0, 0, 1]) == pytest.approx((1, 0, 0, 0))

    def test_perpendicular_offset(self):
        q = ppf([1, 0, 0], [0, 0, 1], [0, 0, 0], [0, 0, 1])
        assert q == pytest.approx((1, np.pi / 2, np.pi / 2, 0))

    def test_self_pair(self):
        n = unit(np.array([1.0, 2.0, 3.0]))
        assert tuple(ppf([1, 1, 1], n, [1, 1, 1], n)) == (0.0, 0.0, 0.0, 0.0)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            x, xr = rng.normal(size=(2, 3))
            n, nr = (unit(v) for v in rng.normal(size=(2, 3)))
            T = RigidTransform.random(rng, 5.0)
            a = np.array(ppf(x, n, xr, nr))
            b = np.array(ppf(T.apply(x)[0], T.rotation @ n, T.apply(xr)[0], T.rotation @ nr))
            np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_swap_relation(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b = rng.normal(size=(2, 3))
            na, nb = (unit(v) for v in rng.normal(size=(2, 3)))
            ab, ba = ppf(a, na, b, nb), ppf(b, nb, a, na)
            assert ab.dist == pytest.approx(ba.dist) and ab.angle_nn == pytest.approx(ba.angle_nn)
            # angle_nd1 of (a|b) uses n_b with d = a - b; angle_nd2 of (b|a) uses n_b with -d
            assert ab.angle_nd1 == pytest.approx(np.pi - ba.angle_nd2, abs=1e-12)

    def test_batch_matches_scalar(self, rng):
        x, n, xr, nr = rng.normal(size=(4, 10, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        nr /= np.linalg.norm(nr, axis=1, keepdims=True)
        batch = ppf_batch(x, n, xr, nr)
        for k in range(10):
            assert tuple(batch[k]) == tuple(ppf(x[k], n[k], xr[k], nr[k]))


def _cloud(seed=0, n=300):
    rng = np.random.default_rng(seed)
    return estimate_normals(PointCloud(rng.normal(size=(n, 3))), 10)


class TestSignatures:
    def test_singleton_support(self):
        cloud = PointCloud([[0.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
        sig = local_signature(cloud, SupportRegion(0, np.array([0])))
        np.testing.assert_array_equal(sig.quadruples, [[0.0, 0.0, 0.0, 0.0]])

    def test_local_size(self):
        cloud = _cloud()
        region = support_regions(cloud, farthest_point_sampling(cloud, 5), 0.8, 40)[2]
        assert len(local_signature(cloud, region)) == region.member_indices.size

    def test_missing_normals(self):
        with pytest.raises(InvalidInputError):
            local_signature(PointCloud(np.zeros((1, 3))), SupportRegion(0, np.array([0])))

    def test_local_rotation_invariance(self):
        cloud = _cloud(1)
        nodes = farthest_point_sampling(cloud, 16)
        rng = np.random.default_rng(5)
        ref = [local_signature(cloud, r).quadruples for r in support_regions(cloud, nodes, 0.7, 32)]
        for _ in range(20):
            moved = apply_transform(RigidTransform.random(rng, 1.0), cloud)
            mnodes = farthest_point_sampling(moved, 16)
            got = [local_signature(moved, r).quadruples for r in support_regions(moved, mnodes, 0.7, 32)]
            for a, b in zip(ref, got):
                np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_global_two_nodes(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [1, 0, 0]])
        sig = global_signature(cloud, NodeSet(np.array([0, 1]), 2), 0)
        np.testing.assert_allclose(sig.quadruples, [[1, 0, 0, 0]], atol=1e-15)

    def test_global_size_and_order(self):
        cloud = _cloud(2)
        nodes = farthest_point_sampling(cloud, 12)
        arr = global_signatures_array(cloud, nodes)
        for i in range(12):
            sig = global_signature(cloud, nodes, i)
            assert len(sig) == 11
            np.testing.assert_array_equal(sig.quadruples, arr[i])

    def test_global_needs_two_nodes(self):
        cloud = _cloud(3)
        with pytest.raises(InvalidInputError):
            global_signature(cloud, farthest_point_sampling(cloud, 1), 0)

    def test_global_rotation_invariance(self):
        cloud = _cloud(4)
        nodes = farthest_point_sampling(cloud, 20)
        ref = global_signatures_array(cloud, nodes)
        rng = np.random.default_rng(6)
        for _ in range(20):
            moved = apply_transform(RigidTransform.random(rng, 1.0), cloud)
            got = global_signatures_array(moved, farthest_point_sampling(moved, 20))
            np.testing.assert_allclose(got, ref, atol=1e-9, rtol=0)
