import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clap_pretrain import diffengine as de
from clap_pretrain.encoders import GridSpec, VoxelFeatureGrid
from clap_pretrain.protolearn import (
    em_loss,
    gram_loss,
    init_proto_params,
    marginal_error,
    mean_offdiag_cosine,
    normalize_rows,
    project_embeddings,
    proto_loss,
    renormalize,
    similarity,
    sinkhorn_codes,
    swav_loss,
)

LN4 = math.log(4.0)


def random_scores(seed, n=8, k=4):
    rng = np.random.default_rng(seed)
    return renormalize(rng.normal(size=(n, 6))) @ renormalize(rng.normal(size=(k, 6))).T


def marginal_kl(q):
    n, k = q.shape
    col = q.sum(0) / n
    return float(np.sum(col * np.log(col * k)))


class TestEmbeddings:
    def grids(self, seed=0, zero_rows=()):
        spec = GridSpec(dims=(4, 4, 2))
        rng = np.random.default_rng(seed)
        p = rng.normal(size=spec.dims + (6,))
        i = rng.normal(size=spec.dims + (3,))
        for r in zero_rows:
            p.reshape(-1, 6)[r] = 0.0
        occ = np.ones(spec.dims, bool)
        return VoxelFeatureGrid(spec, p, occ), VoxelFeatureGrid(spec, i, occ)

    def params(self):
        return init_proto_params(np.random.default_rng(1), d_p=6, d_i=3, d_k=5, n_k=4, hidden=7)

    def test_unit_rows_and_count(self):
        ep, ei, flagged = project_embeddings(*self.grids(), self.params())
        assert ep.shape == (32, 5) and ei.shape == (32, 5)
        np.testing.assert_allclose(np.linalg.norm(ep.data, axis=1), 1.0)
        np.testing.assert_allclose(np.linalg.norm(ei.data, axis=1), 1.0)
        assert not flagged.any()

    def test_desk_scale_row_count(self):
        assert GridSpec().n_voxels == 2048

    def test_zero_row_replaced_and_flagged(self):
        out, flag = normalize_rows(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[1, 0, 0], [0.6, 0, 0.8]])
        np.testing.assert_array_equal(flag, [True, False])

    def test_row_subset(self):
        rows = np.array([3, 7, 11])
        full, _, _ = project_embeddings(*self.grids(), self.params())
        sub, _, _ = project_embeddings(*self.grids(), self.params(), rows)
        np.testing.assert_allclose(sub.data, full.data[rows])

    def test_gradient_reaches_both_heads(self):
        tape = de.Tape()
        params = {k: tape.leaf(k, v) for k, v in self.params().items()}
        ep, ei, _ = project_embeddings(*self.grids(), params)
        terms = proto_loss(similarity(ep, params["proto.K"]), similarity(ei, params["proto.K"]), params["proto.K"])
        gp, gi = de.gradient(terms.loss, ["proj.P.fc1.w", "proj.I.fc1.w"])
        assert np.linalg.norm(gp) > 0 and np.linalg.norm(gi) > 0

    def test_needs_two_prototypes(self):
        with pytest.raises(ValueError):
            init_proto_params(np.random.default_rng(0), n_k=1)


class TestSimilarity:
    def test_identical_and_orthogonal(self):
        bank = np.eye(3)
        s = similarity(np.array([[0.0, 1.0, 0.0]]), bank).data
        np.testing.assert_array_equal(s, [[0, 1, 0]])

    def test_bounded(self):
        s = random_scores(0, 50, 10)
        assert np.all(np.abs(s) <= 1 + 1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(de.ShapeError):
            similarity(np.ones((2, 3)), np.ones((4, 5)))


class TestEM:
    def test_uniform_rows(self):
        assert abs(em_loss(np.zeros((1, 4)), np.zeros((1, 4))).data - 2 * LN4 / 4) < 1e-9

    def test_one_hot_limit(self):
        s = np.array([[60.0, 0, 0, 0], [0, 60.0, 0, 0]])
        assert em_loss(s, s).data < 1e-20

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.floats(-20, 20)))
    def test_nonnegative(self, s):
        assert em_loss(s, s[::-1]).data >= -1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            em_loss(np.zeros((2, 4)), np.zeros((3, 4)))


class TestSinkhorn:
    def test_constant_scores(self):
        np.testing.assert_allclose(sinkhorn_codes(np.full((6, 3), 0.4), 3), 1 / 3, atol=1e-15)

    def test_symmetry(self):
        q = sinkhorn_codes(np.array([[0.7, 0.2], [0.2, 0.7]]), 5)
        np.testing.assert_allclose(q, q[::-1, ::-1], atol=1e-15)

    def test_rows_sum_to_one(self):
        q = sinkhorn_codes(random_scores(3), 3)
        np.testing.assert_allclose(q.sum(1), 1.0, atol=1e-14)
        assert np.all(q >= 0)

    def test_converges_to_balanced_marginals(self):
        q = sinkhorn_codes(random_scores(4), 2000)
        assert marginal_error(q) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_marginal_kl_non_increasing(self, seed):
        s = random_scores(seed)
        kls = [marginal_kl(sinkhorn_codes(s, n)) for n in range(1, 12)]
        assert np.all(np.diff(kls) <= 1e-12)

    def test_more_iterations_help(self):
        s = random_scores(5)
        assert marginal_error(sinkhorn_codes(s, 3)) < marginal_error(sinkhorn_codes(s, 1))

    def test_large_scores_do_not_overflow(self):
        q = sinkhorn_codes(np.array([[1e3, -1e3], [-1e3, 1e3]]), 3)
        assert np.all(np.isfinite(q))

    def test_dominant_entry_keeps_argmax(self):
        eps, k = 0.05, 4
        margin = 2 * eps * math.log(k)
        s = np.zeros((4, k))
        s[np.arange(4), np.arange(4)] = margin + 1e-3
        q = sinkhorn_codes(s, 3, eps)
        np.testing.assert_array_equal(q.argmax(1), np.arange(4))

    def test_detached_input(self):
        tape = de.Tape()
        s = tape.leaf("s", random_scores(6))
        q = sinkhorn_codes(s, 3)
        assert isinstance(q, np.ndarray)


class TestSwAV:
    def test_uniform_codes_constant_scores(self):
        q = np.full((1, 4), 0.25)
        assert abs(swav_loss(np.zeros((1, 4)), np.zeros((1, 4)), q, q).data - 2 * LN4 / 4) < 1e-12

    def test_confident_match(self):
        s = np.array([[80.0, 0, 0], [0, 0, 80.0]])
        q = np.array([[1.0, 0, 0], [0, 0, 1.0]])
        assert swav_loss(s, s, q, q).data < 1e-20

    def test_temperature(self):
        s = random_scores(7)
        q = sinkhorn_codes(s, 3)
        a = swav_loss(s, s, q, q, tau=0.5).data
        b = swav_loss(2 * s, 2 * s, q, q, tau=1.0).data
        assert abs(a - b) < 1e-14

    def test_gradient_only_through_scores(self):
        rng = np.random.default_rng(8)
        e = renormalize(rng.normal(size=(8, 5)))
        k0 = renormalize(rng.normal(size=(4, 5)))
        q_p, q_i = sinkhorn_codes(e @ k0.T, 3), sinkhorn_codes(e[::-1] @ k0.T, 3)

        def grad_k(codes):
            tape = de.Tape()
            k = tape.leaf("K", k0)
            loss = swav_loss(similarity(e, k), similarity(e[::-1], k), *codes)
            return de.gradient(loss, ["K"])[0]

        g = grad_k((q_p, q_i))
        assert np.linalg.norm(g) > 0
        # codes are constants: recomputing them from a perturbed bank must not enter the gradient path
        tape = de.Tape()
        k = tape.leaf("K", k0)
        s_p, s_i = similarity(e, k), similarity(e[::-1], k)
        loss = swav_loss(s_p, s_i, sinkhorn_codes(s_p, 3), sinkhorn_codes(s_i, 3))
        np.testing.assert_array_equal(de.gradient(loss, ["K"])[0], g)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            swav_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)))


class TestGram:
    def test_orthonormal(self):
        assert abs(gram_loss(np.eye(4)).data) < 1e-15

    def test_identical(self):
        assert abs(gram_loss(np.tile([[0.0, 1.0, 0.0]], (5, 1))).data - 1.0) < 1e-12

    def test_sixty_degrees(self):
        bank = np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        assert abs(gram_loss(bank).data - 0.5) < 1e-12

    def test_mean_offdiag_cosine_ignores_scale(self):
        bank = np.array([[2.0, 0.0], [1.5, 1.5 * math.sqrt(3)]])
        assert abs(mean_offdiag_cosine(bank) - 0.5) < 1e-12

    def test_renormalize_unit_rows(self):
        b = renormalize(np.random.default_rng(0).normal(size=(6, 4)) * 7)
        np.testing.assert_allclose(np.linalg.norm(b, axis=1), 1.0)


class TestProtoLoss:
    def scores(self):
        return random_scores(10), random_scores(11)

    def test_weighted_sum(self):
        s_p, s_i = self.scores()
        bank = renormalize(np.random.default_rng(0).normal(size=(4, 3)))
        t = proto_loss(s_p, s_i, bank, omega_swav=1.0, omega_em=0.1, omega_gmm=0.1)
        expected = t.swav.data + 0.1 * t.em.data + 0.1 * t.gmm.data
        assert abs(t.loss.data - expected) < 1e-15

    def test_doubling_em_weight(self):
        s_p, s_i = self.scores()
        bank = np.eye(4)
        a = proto_loss(s_p, s_i, bank, omega_em=0.1).loss.data
        b = proto_loss(s_p, s_i, bank, omega_em=0.2).loss.data
        assert abs((b - a) - 0.1 * em_loss(s_p, s_i).data) < 1e-14

    def test_all_zero_weights(self):
        s_p, s_i = self.scores()
        assert proto_loss(s_p, s_i, np.eye(4), omega_swav=0, omega_em=0, omega_gmm=0).loss.data == 0.0

    def test_supplied_codes_are_reused(self):
        s_p, s_i = self.scores()
        codes = (np.full((8, 4), 0.25), np.full((8, 4), 0.25))
        assert proto_loss(s_p, s_i, np.eye(4), codes).codes is codes

    def test_negative_weight(self):
        s_p, s_i = self.scores()
        with pytest.raises(ValueError):
            proto_loss(s_p, s_i, np.eye(4), omega_gmm=-0.1)
