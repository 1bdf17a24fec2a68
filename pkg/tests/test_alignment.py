"""Projection heads, cosine similarity, and the contrastive loss."""

import math

import numpy as np
import pytest

from scenecap.alignment import (AlignedPair, ProjectionHeads, info_nce,
                                l2_normalize, project_and_normalize, similarity)
from scenecap.autodiff import Tensor, finite_difference_check
from scenecap.errors import DegenerateEmbeddingError

RNG = np.random.default_rng(200)


def pair_of(a, b) -> AlignedPair:
    return AlignedPair(Tensor(np.asarray(a, float)), Tensor(np.asarray(b, float)))


def random_pairs(n, d, rng):
    return [pair_of(u / np.linalg.norm(u), v / np.linalg.norm(v))
            for u, v in ((rng.normal(size=d), rng.normal(size=d)) for _ in range(n))]


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(Tensor(v)).data, v)

    def test_zero_vector_is_an_error_not_nan(self):
        with pytest.raises(DegenerateEmbeddingError):
            l2_normalize(Tensor([0.0, 0.0]))

    def test_heads_produce_unit_norms(self):
        heads = ProjectionHeads(RNG, 6, 6, 4)
        pair = project_and_normalize(Tensor(RNG.normal(size=6)),
                                     Tensor(RNG.normal(size=6)), heads)
        assert abs(np.linalg.norm(pair.scene_unit.data) - 1.0) < 1e-9
        assert abs(np.linalg.norm(pair.text_unit.data) - 1.0) < 1e-9


class TestSimilarity:
    def test_self_similarity_is_one(self):
        v = RNG.normal(size=5)
        v /= np.linalg.norm(v)
        assert similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        assert similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_cosine_closed_form(self):
        theta = math.pi / 3
        assert similarity([1.0, 0.0], [math.cos(theta), math.sin(theta)]) == \
            pytest.approx(0.5)


class TestInfoNCE:
    def test_single_pair_is_exactly_zero(self):
        loss = info_nce(random_pairs(1, 4, np.random.default_rng(1)), 0.3)
        assert loss.item() == 0.0

    def test_orthogonal_two_pair_fixture(self):
        pairs = [pair_of([1.0, 0.0], [1.0, 0.0]), pair_of([0.0, 1.0], [0.0, 1.0])]
        loss = info_nce(pairs, 1.0)
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)
        assert loss.item() == pytest.approx(0.313262, abs=1e-6)

    def test_huge_temperature_approaches_log_n(self):
        pairs = random_pairs(4, 6, np.random.default_rng(2))
        loss = info_nce(pairs, 1e4)
        assert abs(loss.item() - math.log(4)) < 1e-3

    def test_strictly_positive_for_two_or_more_pairs(self):
        for seed in range(5):
            pairs = random_pairs(2 + seed, 5, np.random.default_rng(seed))
            assert info_nce(pairs, 0.5).item() > 0.0

    def test_batch_order_invariance(self):
        rng = np.random.default_rng(3)
        pairs = random_pairs(5, 4, rng)
        a = info_nce(pairs, 0.7).item()
        b = info_nce(list(reversed(pairs)), 0.7).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            info_nce([], 1.0)

    def test_symmetric_flag_averages_both_directions(self):
        rng = np.random.default_rng(4)
        pairs = random_pairs(3, 4, rng)
        asym = info_nce(pairs, 1.0).item()
        flipped = [AlignedPair(p.text_unit, p.scene_unit) for p in pairs]
        asym_t = info_nce(flipped, 1.0).item()
        sym = info_nce(pairs, 1.0, symmetric=True).item()
        assert sym == pytest.approx((asym + asym_t) / 2, rel=1e-12)

    def test_argmax_retrieval_invariant_under_temperature(self):
        rng = np.random.default_rng(5)
        scene = rng.normal(size=(6, 4))
        text = rng.normal(size=(6, 4))
        scene /= np.linalg.norm(scene, axis=1, keepdims=True)
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        sims = scene @ text.T
        for scale in (0.01, 1.0, 250.0):
            np.testing.assert_array_equal(np.argmax(sims * scale, axis=1),
                                          np.argmax(sims, axis=1))

    def test_gradient_wrt_embeddings(self):
        def f(t):
            pairs = [AlignedPair(t[0], t[2]), AlignedPair(t[1], t[3])]
            return info_nce(pairs, 0.5)

        err = finite_difference_check(f, Tensor(RNG.normal(size=(4, 5))))
        assert err < 1e-4

    def test_gradient_wrt_log_tau(self):
        heads = ProjectionHeads(np.random.default_rng(6), 4, 4, 4)
        pairs = random_pairs(3, 4, np.random.default_rng(7))

        def f(log_tau):
            heads.log_tau.data = log_tau.data
            saved = heads.log_tau
            try:
                heads.log_tau = log_tau
                return info_nce(pairs, heads.tau_tensor())
            finally:
                heads.log_tau = saved

        err = finite_difference_check(f, Tensor(np.array([math.log(0.07)])))
        assert err < 1e-4

    def test_tau_clamped_on_read(self):
        heads = ProjectionHeads(np.random.default_rng(8), 4, 4, 4, tau_init=0.07)
        heads.log_tau.data[:] = 50.0  # exp -> astronomically large
        assert heads.tau == 100.0
        heads.log_tau.data[:] = -50.0
        assert heads.tau == 0.01
