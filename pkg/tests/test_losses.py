import warnings

import numpy as np
import pytest

from riga import diffcore as dc
from riga.diffcore import Parameter, Tensor
from riga.errors import InvalidInputError
from riga.geom import RigidTransform
from riga.losses import GtMatchSets, LossConfig, build_gt_sets, circle_loss, fine_nll_loss, \
    fine_nll_loss_batch, overlap_ratio_matrix, overlap_stats, total_loss
from riga.matcher import sinkhorn_log_batch


def brute_counts(px, py, T, tau):
    tx = T.apply(px)
    nij = sum(any(np.linalg.norm(a - b) < tau for b in py) for a in tx)
    nji = sum(any(np.linalg.norm(a - b) < tau for a in tx) for b in py)
    return nij, nji


def brute_gt(px, py, T, tau):
    tx = T.apply(px)
    m = [(u, v) for u in range(len(px)) for v in range(len(py)) if np.linalg.norm(tx[u] - py[v]) < tau]
    ux = [u for u in range(len(px)) if all(a != u for a, _ in m)]
    uy = [v for v in range(len(py)) if all(b != v for _, b in m)]
    return m, ux, uy


def literal_circle(dist, ratios, cfg):
    """Direct per-anchor evaluation of the coarse loss on one side."""
    vals = []
    for i in range(dist.shape[0]):
        pos = [j for j in range(dist.shape[1]) if ratios[i, j] > 0]
        neg = [j for j in range(dist.shape[1]) if ratios[i, j] == 0]
        if not pos or not neg:
            continue
        sp = sum(np.exp(ratios[i, j] * cfg.gamma * (dist[i, j] - cfg.delta_p) ** 2) for j in pos)
        sn = sum(np.exp(cfg.gamma * (cfg.delta_n - dist[i, j]) ** 2) for j in neg)
        vals.append(np.log1p(sp * sn))
    return np.mean(vals) if vals else None


class TestOverlap:
    def test_identical(self, rng):
        px = rng.normal(size=(30, 3))
        T = RigidTransform.random(rng, 0.5)
        st = overlap_stats(px, T.apply(px), T, 0.05)
        assert st.ratio == 1.0 and st.n_i_to_j == st.n_j_to_i == 30

    def test_far_apart(self, rng):
        st = overlap_stats(rng.normal(size=(10, 3)), 100 + rng.normal(size=(10, 3)),
                           RigidTransform.identity(), 0.05)
        assert st.ratio == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            px, py = rng.uniform(0, 1, size=(2, 100, 3))
            T = RigidTransform.random(rng, 0.1)
            st = overlap_stats(px, py, T, 0.15)
            assert (st.n_i_to_j, st.n_j_to_i) == brute_counts(px, py, T, 0.15)

    def test_symmetric(self, rng):
        px, py = rng.uniform(0, 1, size=(2, 40, 3))
        T = RigidTransform.random(rng, 0.1)
        a = overlap_stats(px, py, T, 0.2)
        b = overlap_stats(py, px, T.inverse(), 0.2)
        assert a.ratio == b.ratio

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            overlap_stats(np.zeros((0, 3)), np.zeros((2, 3)), RigidTransform.identity(), 0.1)

    def test_matrix_matches_per_pair(self):
        rng = np.random.default_rng(4)
        px, py = rng.uniform(0, 1, size=(2, 120, 3))
        ax, ay = rng.integers(0, 6, 120), rng.integers(0, 5, 120)
        T = RigidTransform.random(rng, 0.05)
        ratios, nij, nji = overlap_ratio_matrix(px, py, ax, ay, 6, 5, T, 0.1)
        for i in range(6):
            for j in range(5):
                vx, vy = px[ax == i], py[ay == j]
                if len(vx) and len(vy):
                    st = overlap_stats(vx, vy, T, 0.1)
                    assert (nij[i, j], nji[i, j]) == (st.n_i_to_j, st.n_j_to_i)
                    assert ratios[i, j] == pytest.approx(st.ratio, abs=1e-15)


class TestCircleLoss:
    CFG = LossConfig()

    def _loss(self, dx, dy, ratios, **kw):
        return circle_loss(Tensor(dx), Tensor(dy), ratios, self.CFG, **kw)

    def test_matches_literal_evaluation(self, rng):
        dx, dy = rng.normal(size=(6, 4)), rng.normal(size=(7, 4))
        ratios = np.where(rng.uniform(size=(6, 7)) < 0.3, rng.uniform(0.1, 1, size=(6, 7)), 0.0)
        ratios[:, 0] = 0.5  # every anchor has a positive
        dist = np.linalg.norm(dx[:, None] - dy[None], axis=2)
        ref = 0.5 * (literal_circle(dist, ratios, self.CFG) + literal_circle(dist.T, ratios.T, self.CFG))
        loss, skipped = self._loss(dx, dy, ratios)
        assert not skipped
        assert loss.item() == pytest.approx(ref, rel=1e-12)

    def test_exponents_vanish_at_margins(self):
        # one anchor, positives at distance delta_p, negatives at delta_n
        dx = np.zeros((1, 3))
        dy = np.array([[0.1, 0, 0], [0, 0.1, 0], [1.4, 0, 0], [0, 1.4, 0], [0, 0, 1.4]])
        ratios = np.array([[0.3, 0.8, 0.0, 0.0, 0.0]])
        loss, _ = self._loss(dx, dy, ratios, anchors_y=np.zeros(0, np.int64))
        # the y side has no anchors, so only half the x-side value remains
        assert loss.item() == pytest.approx(0.5 * np.log(1 + 2 * 3), rel=1e-12)

    def test_ideal_geometry_value(self):
        # positives at 0 and negatives at 2 do not drive the loss to zero:
        # both exponents are squared distances to the margins
        dx = np.zeros((1, 3))
        dy = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        ratios = np.array([[1.0, 0.0]])
        loss, _ = self._loss(dx, dy, ratios, anchors_y=np.zeros(0, np.int64))
        expected = np.log1p(np.exp(10 * 0.1 ** 2) * np.exp(10 * 0.6 ** 2))
        assert 2 * loss.item() == pytest.approx(expected, rel=1e-12)

    def test_nonnegative_and_order_free(self, rng):
        dx, dy = rng.normal(size=(5, 3)), rng.normal(size=(8, 3))
        ratios = np.where(rng.uniform(size=(5, 8)) < 0.4, 0.5, 0.0)
        ratios[:, 1] = 0.2
        perm = rng.permutation(8)
        a, _ = self._loss(dx, dy, ratios)
        b, _ = self._loss(dx, dy[perm], ratios[:, perm])
        assert a.item() >= 0
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_anchor_skipping(self):
        ratios = np.array([[0.5, 0.5], [0.5, 0.0]])  # anchor 0 has no negative
        dx, dy = np.eye(2), np.eye(2)[::-1]
        dist = np.linalg.norm(dx[:, None] - dy[None], axis=2)
        loss, _ = self._loss(dx, dy, ratios)
        ref_x = literal_circle(dist, ratios, self.CFG)
        ref_y = literal_circle(dist.T, ratios.T, self.CFG)
        assert loss.item() == pytest.approx(0.5 * (ref_x + ref_y), rel=1e-12)

    def test_all_skipped_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss, skipped = self._loss(np.eye(2), np.eye(2), np.ones((2, 2)))
        assert skipped and loss.item() == 0.0
        assert any(issubclass(w.category, RuntimeWarning) for w in caught)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        px, py = Parameter(rng.normal(size=(3, 4)), "x"), Parameter(rng.normal(size=(4, 4)), "y")
        ratios = np.array([[0.4, 0.9, 0.0, 0.0], [0.0, 0.3, 0.7, 0.0], [0.0, 0.0, 0.2, 0.6]])
        ratios[0, 2] = 0.0
        fn = lambda: circle_loss(px, py, ratios, self.CFG)[0]  # noqa: E731
        assert dc.gradient_check(fn, [px, py]) < 1e-4


class TestGtSets:
    def test_identical(self, rng):
        p = rng.normal(size=(8, 3))
        gt = build_gt_sets(p, p, RigidTransform.identity(), 1e-6)
        assert gt.matches.tolist() == [[k, k] for k in range(8)]
        assert gt.unmatched_x.size == gt.unmatched_y.size == 0

    def test_disjoint(self, rng):
        gt = build_gt_sets(rng.normal(size=(4, 3)), 50 + rng.normal(size=(5, 3)),
                           RigidTransform.identity(), 0.1)
        assert gt.matches.size == 0
        assert gt.unmatched_x.tolist() == [0, 1, 2, 3] and gt.unmatched_y.tolist() == [0, 1, 2, 3, 4]

    def test_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            px, py = rng.uniform(0, 1, size=(2, 30, 3))
            T = RigidTransform.random(rng, 0.1)
            gt = build_gt_sets(px, py, T, 0.2)
            m, ux, uy = brute_gt(px, py, T, 0.2)
            assert [tuple(r) for r in gt.matches.tolist()] == m
            assert gt.unmatched_x.tolist() == ux and gt.unmatched_y.tolist() == uy


class TestFineNll:
    def test_certain(self):
        Z = np.eye(3)
        gt = GtMatchSets(np.array([[0, 0], [1, 1]]), np.zeros(0, np.int64), np.zeros(0, np.int64))
        assert fine_nll_loss(Z, gt).item() == 0.0

    def test_uniform_square(self):
        a = 4
        Z = np.full((a + 1, a + 1), 1.0 / (a + 1))
        gt = GtMatchSets(np.array([[0, 1], [2, 2]]), np.array([1, 3]), np.array([0]))
        assert fine_nll_loss(Z, gt).item() == pytest.approx(5 * np.log(a + 1), rel=1e-14)

    def test_log_floor(self):
        Z = np.zeros((2, 2))
        gt = GtMatchSets(np.array([[0, 0]]), np.zeros(0, np.int64), np.zeros(0, np.int64))
        assert fine_nll_loss(Z, gt).item() == pytest.approx(-np.log(1e-30))

    def test_out_of_range(self):
        gt = GtMatchSets(np.array([[0, 5]]), np.zeros(0, np.int64), np.zeros(0, np.int64))
        with pytest.raises(InvalidInputError):
            fine_nll_loss(np.eye(3), gt)

    def test_batch_mean(self, rng):
        S = rng.normal(size=(2, 3, 3))
        log_z = sinkhorn_log_batch(Tensor(S), 0.5, [3, 3], [3, 3], 50)
        gts = [GtMatchSets(np.array([[0, 0]]), np.array([1]), np.array([2])),
               GtMatchSets(np.array([[1, 2], [2, 2]]), np.zeros(0, np.int64), np.array([0, 1]))]
        single = [fine_nll_loss(Tensor(log_z.data[g]), gts[g]).item() for g in range(2)]
        assert fine_nll_loss_batch(log_z, gts).item() == pytest.approx(np.mean(single), rel=1e-14)

    def test_gradient_through_sinkhorn(self):
        rng = np.random.default_rng(7)
        S = Parameter(rng.normal(size=(1, 3, 3)), "S")
        alpha = Parameter(np.array([1.0]), "alpha")
        gt = GtMatchSets(np.array([[0, 1], [2, 0]]), np.array([1]), np.array([2]))
        fn = lambda: fine_nll_loss_batch(sinkhorn_log_batch(S, alpha, [3], [3], 100), [gt])  # noqa: E731
        assert dc.gradient_check(fn, [S, alpha]) < 1e-4


class TestTotal:
    def test_examples(self):
        assert total_loss(2.0, 3.0, 0.0) == 2.0
        assert total_loss(2.0, 3.0, 1.0) == 5.0
        assert total_loss(2.0, 6.0, 1.0) - total_loss(2.0, 3.0, 1.0) == 3.0

    def test_tensor_path(self):
        out = total_loss(Tensor(2.0), Tensor(3.0), 0.5)
        assert out.item() == 3.5

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            LossConfig(delta_p=1.5, delta_n=1.4)
