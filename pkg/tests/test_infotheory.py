import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idm.errors import InvalidArgument, ResourceLimitError
from idm.infotheory import (CovariancePair, DiscreteJoint, gaussian_loglik,
                            indistinguishable_covariances, kl_divergence, mutual_information,
                            mutual_information_given, nats_to_bits, pinsker_chain,
                            predictor_gap, random_joint, verify_shift_decomposition, xor_joint,
                            xor_counterexample)

LN2 = math.log(2.0)


def brute_mi(table):
    """I(A;B) for a 2-D table by a plain double loop."""
    pa, pb = table.sum(axis=1), table.sum(axis=0)
    total = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            if table[i, j] > 0:
                total += table[i, j] * math.log(table[i, j] / (pa[i] * pb[j]))
    return total


def xyd_from(fn):
    """Joint over fair bits X, D with Y = fn(x, d)."""
    p = np.zeros((2, 2, 2))
    for x in range(2):
        for d in range(2):
            p[x, fn(x, d), d] = 0.25
    return DiscreteJoint(("X", "Y", "D"), (2, 2, 2), p.ravel())


joint_cards = st.lists(st.integers(2, 4), min_size=3, max_size=3)


class TestDiscreteJoint:
    def test_rejects_unnormalized(self):
        with pytest.raises(InvalidArgument):
            DiscreteJoint(("A",), (2,), [0.5, 0.6])

    def test_rejects_negative_and_bad_length(self):
        with pytest.raises(InvalidArgument):
            DiscreteJoint(("A",), (2,), [1.5, -0.5])
        with pytest.raises(InvalidArgument):
            DiscreteJoint(("A", "B"), (2, 2), [0.5, 0.5])

    def test_json_round_trip_is_row_major(self):
        j = DiscreteJoint(("A", "B"), (2, 3), np.arange(6) / 15.0)
        obj = __import__("json").loads(j.to_json())
        assert obj == {"vars": ["A", "B"], "card": [2, 3], "p": (np.arange(6) / 15.0).tolist()}
        back = DiscreteJoint.from_json(j.to_json())
        assert np.array_equal(back.probabilities, j.probabilities)

    def test_marginal_axis_order_follows_request(self, rng):
        j = random_joint(("A", "B", "C"), (2, 3, 4), rng)
        full = j.probabilities
        assert np.allclose(j.marginal(["C", "A"]), full.sum(axis=1).T)


class TestMutualInformation:
    def test_independent_bits(self):
        j = DiscreteJoint(("A", "B"), (2, 2), [0.25] * 4)
        assert mutual_information(j, "A", "B") == 0.0

    def test_identical_bits(self):
        j = DiscreteJoint(("A", "B"), (2, 2), [0.5, 0, 0, 0.5])
        assert mutual_information(j, "A", "B") == pytest.approx(LN2, abs=1e-15)
        assert nats_to_bits(mutual_information(j, "A", "B")) == pytest.approx(1.0)

    def test_matches_direct_summation(self, rng):
        for _ in range(20):
            j = random_joint(("A", "B", "C"), (2, 2, 2), rng)
            table = j.marginal(["A", "B", "C"]).reshape(2, 4)
            assert mutual_information(j, ["A"], ["B", "C"]) == pytest.approx(
                brute_mi(table), abs=1e-14)

    def test_overlap_rejected(self, rng):
        j = random_joint(("A", "B"), (2, 2), rng)
        with pytest.raises(InvalidArgument):
            mutual_information(j, ["A"], ["A", "B"])

    @settings(max_examples=60, deadline=None)
    @given(cards=joint_cards, seed=st.integers(0, 2 ** 32 - 1),
           sparsity=st.sampled_from([0.0, 0.4]))
    def test_symmetry_and_nonnegativity(self, cards, seed, sparsity):
        j = random_joint(("A", "B", "C"), cards, np.random.default_rng(seed), sparsity)
        ab = mutual_information(j, "A", "B")
        assert ab == pytest.approx(mutual_information(j, "B", "A"), abs=1e-12)
        assert ab >= -1e-12
        assert mutual_information_given(j, "A", "B", "C") >= -1e-12

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_data_processing(self, seed):
        # C = B mod 2 is a deterministic function of B
        r = np.random.default_rng(seed)
        pab = r.exponential(size=(3, 4))
        pab /= pab.sum()
        p = np.zeros((3, 4, 2))
        for b in range(4):
            p[:, b, b % 2] = pab[:, b]
        j = DiscreteJoint(("A", "B", "C"), (3, 4, 2), p.ravel())
        assert mutual_information(j, "A", "C") <= mutual_information(j, "A", "B") + 1e-12


class TestShiftDecomposition:
    def test_random_joints(self, rng):
        for _ in range(200):
            j = random_joint(("X", "Y", "D"), tuple(rng.integers(2, 5, 3)), rng, 0.2)
            assert abs(verify_shift_decomposition(j)) < 1e-12

    def test_independent_domain(self):
        pxy = np.array([[0.1, 0.2], [0.3, 0.4]])
        p = pxy[:, :, None] * np.array([0.5, 0.5])
        j = DiscreteJoint(("X", "Y", "D"), (2, 2, 2), p.ravel())
        assert mutual_information(j, ["X", "Y"], "D") == pytest.approx(0.0, abs=1e-15)
        assert mutual_information(j, "X", "D") == pytest.approx(0.0, abs=1e-15)
        assert mutual_information_given(j, "Y", "D", "X") == pytest.approx(0.0, abs=1e-15)

    def test_xor_concept_shift(self):
        j = xyd_from(lambda x, d: x ^ d)
        assert mutual_information_given(j, "Y", "D", "X") == pytest.approx(LN2, abs=1e-15)
        assert mutual_information(j, "X", "D") == 0.0
        assert abs(verify_shift_decomposition(j)) < 1e-12

    def test_requires_xyd(self, rng):
        with pytest.raises(InvalidArgument):
            verify_shift_decomposition(random_joint(("A", "B", "C"), (2, 2, 2), rng))


class TestPredictorGap:
    def test_bayes_predictor_attains_bound(self, rng):
        for _ in range(50):
            j = random_joint(("X", "Y", "D"), (3, 2, 3), rng)
            pxy = j.marginal(["X", "Y"])
            lhs, rhs = predictor_gap(j, pxy / pxy.sum(axis=1, keepdims=True))
            assert abs(lhs - rhs) < 1e-12

    def test_zero_when_domain_uninformative(self):
        j = xyd_from(lambda x, d: x)
        lhs, rhs = predictor_gap(j, np.eye(2))
        assert lhs == 0.0 and rhs == 0.0

    def test_gap_equals_kl_of_predictors(self, rng):
        for _ in range(50):
            j = random_joint(("X", "Y", "D"), (2, 3, 2), rng)
            q = rng.exponential(size=(2, 3))
            q /= q.sum(axis=1, keepdims=True)
            lhs, rhs = predictor_gap(j, q)
            pxy = j.marginal(["X", "Y"])
            px = pxy.sum(axis=1)
            # E_X KL(P_{Y|X} || Q_{Y|X}), term by term
            oracle = sum(pxy[x, y] * math.log(pxy[x, y] / px[x] / q[x, y])
                         for x in range(2) for y in range(3))
            assert lhs >= rhs
            assert lhs - rhs == pytest.approx(oracle, abs=1e-12)

    def test_zero_q_entry_gives_infinity(self):
        j = xyd_from(lambda x, d: x ^ d)
        lhs, _ = predictor_gap(j, np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert lhs == math.inf

    def test_unnormalized_q_rejected(self):
        with pytest.raises(InvalidArgument):
            predictor_gap(xyd_from(lambda x, d: x), np.array([[0.5, 0.4], [0.5, 0.5]]))


class TestPinsker:
    def test_equal(self):
        assert pinsker_chain([0.3, 0.7], [0.3, 0.7]) == (0.0, 0.0)

    def test_disjoint(self):
        tv, bound = pinsker_chain([1.0, 0.0], [0.0, 1.0])
        assert tv == 1.0 and bound == math.inf

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 10), min_size=2, max_size=8).flatmap(
        lambda a: st.tuples(st.just(a), st.lists(st.floats(0.01, 10), min_size=len(a),
                                                 max_size=len(a)))))
    def test_inequality(self, pair):
        p = np.array(pair[0]) / sum(pair[0])
        q = np.array(pair[1]) / sum(pair[1])
        tv, bound = pinsker_chain(p, q)
        assert tv <= bound + 1e-12
        assert kl_divergence(q, p) >= -1e-12


class TestXor:
    @pytest.mark.parametrize("m", [2, 3, 5, 10])
    def test_counterexample(self, m):
        per_domain, joint = xor_counterexample(m)
        assert len(per_domain) == m
        assert all(abs(v) < 1e-12 for v in per_domain)
        assert joint == pytest.approx(LN2, abs=1e-12)

    def test_limits(self):
        with pytest.raises(InvalidArgument):
            xor_joint(1)
        with pytest.raises(ResourceLimitError):
            xor_joint(21)


class TestIndistinguishableCovariances:
    def test_single_set_example(self, rng):
        x = rng.standard_normal((5, 2))
        pair = indistinguishable_covariances(x, "single_sample_set", seed=3)
        direct = abs(gaussian_loglik(x, pair.sigma1) - gaussian_loglik(x, pair.sigma2))
        assert direct < 1e-8 and pair.loglik_gap < 1e-8
        assert np.linalg.norm(pair.sigma1 - pair.sigma2) > 1e-6

    def test_two_sets_example(self, rng):
        x1, x2 = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
        pair = indistinguishable_covariances(x1, "two_sample_sets", x2, seed=1)
        for s in (pair.sigma1, pair.sigma2):
            assert abs(gaussian_loglik(x1, s) - gaussian_loglik(x2, s)) < 1e-8
        assert np.linalg.norm(pair.sigma1 - pair.sigma2) > 1e-6

    def test_preconditions(self, rng):
        with pytest.raises(InvalidArgument):
            indistinguishable_covariances(rng.standard_normal((3, 2)))
        with pytest.raises(InvalidArgument):
            indistinguishable_covariances(rng.standard_normal((7, 3)), "two_sample_sets",
                                          rng.standard_normal((7, 3)))
        with pytest.raises(InvalidArgument):
            indistinguishable_covariances(rng.standard_normal((8, 3)), "two_sample_sets")
        with pytest.raises(InvalidArgument):
            indistinguishable_covariances(rng.standard_normal((8, 3)), "bogus")

    def test_rank_deficient_data_still_works(self, rng):
        col = rng.standard_normal((6, 1))
        x = np.hstack([col, 2 * col, -col])
        pair = indistinguishable_covariances(x, seed=0)
        assert pair.loglik_gap < 1e-8

    def test_dominated_sets_have_no_solution(self, rng):
        x = rng.standard_normal((8, 2))
        with pytest.raises(InvalidArgument):
            indistinguishable_covariances(2 * x, "two_sample_sets", x)

    def test_gaussian_loglik_against_scipy(self, rng):
        from scipy.stats import multivariate_normal
        x = rng.standard_normal((4, 3))
        a = rng.standard_normal((4, 4))
        s = a @ a.T + np.eye(4)
        ref = multivariate_normal(np.zeros(4), s).logpdf(x.T).sum()
        assert gaussian_loglik(x, s) == pytest.approx(ref, rel=1e-12)

    def test_pair_validation(self):
        with pytest.raises(InvalidArgument):
            CovariancePair(np.eye(2), np.eye(2), 0.0)
        with pytest.raises(InvalidArgument):
            CovariancePair(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(5, 16), seed=st.integers(0, 10 ** 6))
    def test_contract_over_seeds(self, n, seed):
        r = np.random.default_rng(seed)
        b = int(r.integers(1, n - 1))
        pair = indistinguishable_covariances(r.standard_normal((n, b)), seed=seed)
        assert pair.loglik_gap < 1e-8
