import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtpc.circuits import BTREE, CP, FF, HMM, ArchitectureSpec, build
from mtpc.inference import (
    MAX_ENUMERATION,
    CircuitParams,
    ContractError,
    conditional_distribution,
    conditionals_from_prefix,
    dump_joint_csv,
    enumerate_joint,
    evaluate,
    greedy_window,
    partition,
    prefix_marginals,
    random_params,
    sample_window,
    uniform_params,
)

from oracles import empirical, prefix_mass, reference_joint, total_variation


def circuit(kind, n, r, v):
    return build(ArchitectureSpec(kind, n, 1 if kind == FF else r, v))


def one_hot(shape, idx):
    a = np.zeros(shape)
    a[..., idx] = 1.0
    return a


class TestEvaluate:
    def test_ff_uniform(self):
        c = circuit(FF, 2, 1, 2)
        for w in itertools.product(range(2), repeat=2):
            assert evaluate(c, uniform_params(c), w) == pytest.approx(np.log(0.25), abs=1e-12)

    def test_cp_degenerate_mixture(self):
        c = circuit(CP, 2, 2, 2)
        phi = np.full((2, 2, 2), 0.5)
        phi[0, 0] = [1.0, 0.0]
        phi[1, 0] = [0.0, 1.0]
        params = CircuitParams(phi, [np.array([[1.0, 0.0]])])
        assert evaluate(c, params, (0, 1)) == pytest.approx(0.0, abs=1e-12)
        for w in [(0, 0), (1, 0), (1, 1)]:
            assert evaluate(c, params, w) == -np.inf

    @pytest.mark.parametrize("seed", range(3))
    def test_hmm_matches_path_enumeration(self, seed):
        c = circuit(HMM, 3, 2, 2)
        params = random_params(c, np.random.default_rng(seed))
        ref = reference_joint(HMM, params)
        for w in itertools.product(range(2), repeat=3):
            assert np.exp(evaluate(c, params, w)) == pytest.approx(ref[w], abs=1e-12)

    def test_cp_two_by_two_table(self):
        c = circuit(CP, 2, 2, 2)
        phi = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.7], [0.6, 0.4]]])
        w = np.array([[0.25, 0.75]])
        params = CircuitParams(phi, [w])
        for x in itertools.product(range(2), repeat=2):
            expected = sum(w[0, j] * phi[0, j, x[0]] * phi[1, j, x[1]] for j in range(2))
            assert np.exp(evaluate(c, params, x)) == pytest.approx(expected, abs=1e-14)

    def test_bad_tokens(self):
        c = circuit(CP, 2, 2, 3)
        params = uniform_params(c)
        with pytest.raises(ContractError):
            evaluate(c, params, (0, 3))
        with pytest.raises(ContractError):
            evaluate(c, params, (0,))

    def test_bad_param_shapes(self):
        c = circuit(CP, 2, 2, 3)
        with pytest.raises(ContractError):
            evaluate(c, CircuitParams(np.full((2, 3, 3), 1 / 3), [np.full((1, 2), 0.5)]), (0, 0))


class TestPartition:
    @pytest.mark.parametrize("kind", [FF, CP, HMM, BTREE])
    def test_normalized(self, kind):
        c = circuit(kind, 4, 3, 5)
        assert partition(c, random_params(c, np.random.default_rng(1))) == pytest.approx(0.0, abs=1e-7)

    def test_broken_row_scaled(self):
        c = circuit(FF, 1, 1, 3)
        params = uniform_params(c)
        params = CircuitParams(params.phi * 2.0, params.omega)
        assert partition(c, params) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_btree_agrees_with_table_sum(self):
        c = circuit(BTREE, 4, 3, 3)
        params = random_params(c, np.random.default_rng(7))
        assert np.exp(partition(c, params)) == pytest.approx(reference_joint(BTREE, params).sum(), abs=1e-12)


class TestPrefixMarginals:
    def test_ff_cumulative_sum(self):
        c = circuit(FF, 4, 1, 3)
        params = random_params(c, np.random.default_rng(0))
        w = (2, 0, 1, 1)
        expected = np.cumsum([np.log(params.phi[i, 0, w[i]]) for i in range(4)])
        np.testing.assert_allclose(prefix_marginals(c, params, w), expected, atol=1e-12)

    def test_cp_first_entry_by_suffix_sum(self):
        c = circuit(CP, 2, 2, 2)
        params = random_params(c, np.random.default_rng(4))
        pm = prefix_marginals(c, params, (0, 0))
        brute = sum(np.exp(evaluate(c, params, (0, y))) for y in range(2))
        assert np.exp(pm[0]) == pytest.approx(brute, abs=1e-14)
        weights = params.omega[0][0]
        assert np.exp(pm[0]) == pytest.approx(sum(weights[j] * params.phi[0, j, 0] for j in range(2)), abs=1e-14)

    @pytest.mark.parametrize("kind", [FF, CP, HMM, BTREE])
    def test_last_entry_is_evaluate(self, kind):
        c = circuit(kind, 4, 2, 3)
        params = random_params(c, np.random.default_rng(2))
        w = (1, 2, 0, 1)
        assert prefix_marginals(c, params, w)[-1] == pytest.approx(evaluate(c, params, w), abs=1e-12)


class TestConditionals:
    def test_ff_entries_are_phi(self):
        c = circuit(FF, 3, 1, 4)
        params = random_params(c, np.random.default_rng(3))
        w = (3, 1, 0)
        cond = conditionals_from_prefix(prefix_marginals(c, params, w))
        np.testing.assert_allclose(cond, [np.log(params.phi[i, 0, w[i]]) for i in range(3)], atol=1e-12)

    def test_uniform_joint(self):
        c = circuit(HMM, 3, 2, 5)
        cond = conditionals_from_prefix(prefix_marginals(c, uniform_params(c), (0, 4, 2)))
        np.testing.assert_allclose(cond, -np.log(5), atol=1e-12)

    def test_cp_ratio(self):
        c = circuit(CP, 2, 2, 2)
        params = random_params(c, np.random.default_rng(4))
        ref = reference_joint(CP, params)
        cond = conditionals_from_prefix(prefix_marginals(c, params, (0, 1)))
        assert np.exp(cond[1]) == pytest.approx(ref[0, 1] / ref[0].sum(), abs=1e-13)

    def test_zero_mass_prefix_stays_impossible(self):
        out = conditionals_from_prefix([np.log(0.5), -np.inf, -np.inf])
        assert out[1] == -np.inf and out[2] == -np.inf

    def test_inconsistent_marginals_rejected(self):
        with pytest.raises(ContractError):
            conditionals_from_prefix([-np.inf, -1.0])

    @pytest.mark.parametrize("kind", [CP, HMM, BTREE])
    def test_conditional_distribution_matches_table(self, kind):
        c = circuit(kind, 3, 2, 3)
        params = random_params(c, np.random.default_rng(5))
        ref = reference_joint(kind, params)
        for prefix in [(), (2,), (1, 0)]:
            got = np.exp(conditional_distribution(c, params, prefix))
            marg = ref[prefix].reshape(3, -1).sum(axis=1) if len(prefix) < 2 else ref[prefix]
            np.testing.assert_allclose(got, marg / marg.sum(), atol=1e-12)

    def test_conditional_distribution_needs_room(self):
        c = circuit(CP, 2, 2, 3)
        with pytest.raises(ContractError):
            conditional_distribution(c, uniform_params(c), (0, 1))


class TestSampling:
    def test_one_hot_is_deterministic(self):
        c = circuit(BTREE, 4, 2, 3)
        phi = one_hot(c.phi_shape, 0)
        phi[:, 1] = one_hot((4, 3), 2)
        omega = [one_hot(s, 1) for s in c.sum_shapes]
        params = CircuitParams(phi, omega)
        rng = np.random.default_rng(0)
        for _ in range(5):
            np.testing.assert_array_equal(sample_window(c, params, rng), [2, 2, 2, 2])
        np.testing.assert_array_equal(sample_window(c, params, rng, size=7), np.full((7, 4), 2))

    def test_ff_uniform_frequencies(self):
        c = circuit(FF, 2, 1, 3)
        draws = sample_window(c, uniform_params(c), np.random.default_rng(0), size=100_000)
        freq = empirical(draws, 3, 2).ravel()
        sigma = np.sqrt((1 / 9) * (8 / 9) / 100_000)
        assert np.all(np.abs(freq - 1 / 9) <= 3 * sigma)

    def test_hmm_total_variation(self):
        c = circuit(HMM, 3, 2, 2)
        params = random_params(c, np.random.default_rng(11))
        draws = sample_window(c, params, np.random.default_rng(1), size=200_000)
        assert total_variation(empirical(draws, 2, 3), enumerate_joint(c, params)) <= 0.01

    @pytest.mark.parametrize("kind", [CP, BTREE])
    def test_scalar_path_has_the_same_law(self, kind):
        c = circuit(kind, 3, 3, 2)
        params = random_params(c, np.random.default_rng(8))
        rng = np.random.default_rng(2)
        draws = np.array([sample_window(c, params, rng) for _ in range(20_000)])
        assert total_variation(empirical(draws, 2, 3), reference_joint(kind, params)) <= 0.02

    def test_reproducible(self):
        c = circuit(HMM, 4, 3, 5)
        params = random_params(c, np.random.default_rng(0))
        a = sample_window(c, params, np.random.default_rng(9), size=50)
        b = sample_window(c, params, np.random.default_rng(9), size=50)
        np.testing.assert_array_equal(a, b)


class TestGreedy:
    def test_ff_per_position_argmax(self):
        c = circuit(FF, 4, 1, 6)
        params = random_params(c, np.random.default_rng(0), scale=3.0)
        np.testing.assert_array_equal(greedy_window(c, params), params.phi[:, 0].argmax(axis=-1))

    def test_one_hot(self):
        c = circuit(CP, 3, 2, 4)
        params = CircuitParams(one_hot(c.phi_shape, 3), [np.array([[0.5, 0.5]])])
        np.testing.assert_array_equal(greedy_window(c, params), [3, 3, 3])

    def test_cp_chain_argmax_by_enumeration(self):
        c = circuit(CP, 2, 2, 3)
        params = random_params(c, np.random.default_rng(12), scale=2.0)
        ref = reference_joint(CP, params)
        first = int(ref.sum(axis=1).argmax())
        second = int(ref[first].argmax())
        np.testing.assert_array_equal(greedy_window(c, params), [first, second])


class TestEnumerateJoint:
    def test_ff_uniform(self):
        c = circuit(FF, 2, 1, 2)
        np.testing.assert_allclose(enumerate_joint(c, uniform_params(c)).ravel(), [0.25] * 4)

    @pytest.mark.parametrize("kind", [FF, CP, HMM, BTREE])
    def test_sums_to_one(self, kind):
        c = circuit(kind, 4, 3, 4)
        assert enumerate_joint(c, random_params(c, np.random.default_rng(0))).sum() == pytest.approx(1.0, abs=1e-6)

    def test_cp_rank_one_equals_ff(self):
        ff, cp = circuit(FF, 3, 1, 4), circuit(CP, 3, 1, 4)
        params = random_params(ff, np.random.default_rng(6))
        np.testing.assert_allclose(
            enumerate_joint(cp, CircuitParams(params.phi, [np.ones((1, 1))])), enumerate_joint(ff, params), atol=1e-15
        )

    def test_guard(self):
        c = circuit(FF, 7, 1, 8)
        assert 8**7 > MAX_ENUMERATION
        with pytest.raises(ContractError):
            enumerate_joint(c, uniform_params(c))

    def test_csv_dump(self, tmp_path):
        c = circuit(CP, 2, 2, 2)
        table = enumerate_joint(c, random_params(c, np.random.default_rng(0)))
        path = tmp_path / "joint.csv"
        dump_joint_csv(table, path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["x1", "x2", "probability"]
        assert len(rows) == 5
        assert float(rows[2][2]) == pytest.approx(table[0, 1])


class TestOracleEquivalence:
    @settings(max_examples=40, deadline=None)
    @given(
        st.sampled_from([FF, CP, HMM, BTREE]),
        st.integers(2, 4),
        st.integers(1, 3),
        st.integers(2, 4),
        st.integers(0, 2**31),
    )
    def test_engine_matches_reference(self, kind, n, r, v, seed):
        c = circuit(kind, n, r, v)
        params = random_params(c, np.random.default_rng(seed))
        ref = reference_joint(kind, params)
        np.testing.assert_allclose(enumerate_joint(c, params), ref, atol=1e-12)
        w = tuple(np.random.default_rng(seed + 1).integers(0, v, size=n))
        pm = np.exp(prefix_marginals(c, params, w))
        np.testing.assert_allclose(pm, [prefix_mass(ref, w[: i + 1]) for i in range(n)], atol=1e-12)
        assert partition(c, params) == pytest.approx(0.0, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([CP, HMM, BTREE]), st.integers(0, 2**31))
    def test_prefix_marginals_non_increasing(self, kind, seed):
        c = circuit(kind, 5, 3, 4)
        params = random_params(c, np.random.default_rng(seed))
        w = np.random.default_rng(seed).integers(0, 4, size=5)
        assert np.all(np.diff(prefix_marginals(c, params, w)) <= 1e-12)
