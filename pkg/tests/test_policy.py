import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dro_opf.network import NetworkCase, UncontrollableInjection, Line, validate_case
from dro_opf.policy import (
    AffinePolicy,
    PolicyLayout,
    StructuralInfeasibilityError,
    balance_constraints,
    causality_mask,
    total_injection,
)

from helpers import generator, random_case


class TestCausalityMask:
    def test_three_steps(self):
        mask = causality_mask(1, 3, 1)
        assert mask.sum() == 3
        assert set(zip(*np.nonzero(mask))) == {(1, 0), (2, 0), (2, 1)}

    def test_single_step_has_no_free_entries(self):
        assert causality_mask(2, 1, 3).sum() == 0

    def test_count_formula(self):
        assert causality_mask(2, 4, 2).sum() == 24
        for m, T, n in [(1, 5, 1), (3, 2, 2), (2, 6, 3)]:
            assert causality_mask(m, T, n).sum() == m * n * T * (T - 1) // 2

    def test_same_step_recourse_frees_diagonal(self):
        assert causality_mask(1, 3, 1, same_step_recourse=True).sum() == 6

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            causality_mask(0, 2, 1)


def _one_gen_case(G, same_step=False):
    T = G.shape[0]
    return NetworkCase(
        buses=(1, 2), slack=1, lines=(Line(1, 2, 0.1, 1.0),),
        devices=(generator("g", 1),),
        injections=(UncontrollableInjection("w", 2, np.zeros(T), G),),
        T=T, N_xi=1, same_step_recourse=same_step,
    )


class TestBalance:
    def test_same_step_disturbance_is_structurally_infeasible(self):
        model = validate_case(_one_gen_case(np.eye(3)))
        with pytest.raises(StructuralInfeasibilityError, match="step 0"):
            balance_constraints(model)

    def test_delayed_disturbance_forces_negated_gain(self):
        G = np.eye(3, k=-1)
        model = validate_case(_one_gen_case(G))
        bal = balance_constraints(model)
        z = np.linalg.lstsq(bal.A.toarray(), bal.b, rcond=None)[0]
        assert_allclose(bal.A @ z, bal.b, atol=1e-12)
        # one generator: the system pins every free D entry
        assert np.linalg.matrix_rank(bal.A.toarray()[:, : bal.layout.n_free_D]) == bal.layout.n_free_D
        policy = bal.layout.unpack(z)
        assert_allclose(policy.D[0], -G, atol=1e-12)

    def test_two_generators_leave_one_parameter_per_entry(self):
        G = np.eye(3, k=-1)
        case = _one_gen_case(G)
        case = NetworkCase(case.buses, 1, case.lines, (generator("a", 1), generator("b", 2)), case.injections, 3, 1)
        bal = balance_constraints(validate_case(case))
        lay = bal.layout
        A_D = bal.A.toarray()[:, : lay.n_free_D]
        assert lay.n_free_D == 6
        assert lay.n_free_D - np.linalg.matrix_rank(A_D) == 3
        D1 = np.array([[0, 0, 0], [-0.3, 0, 0], [0.2, -0.7, 0]])
        D2 = -G - D1
        pol = AffinePolicy((D1, D2), (np.zeros(3), np.zeros(3)), lay.masks)
        z = lay.pack(pol)
        assert_allclose(bal.A @ z, bal.b, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_any_solution_balances_every_sample(self, seed):
        rng = np.random.default_rng(seed)
        model = validate_case(random_case(rng))
        bal = balance_constraints(model)
        A = bal.A.toarray()
        z0 = np.linalg.lstsq(A, bal.b, rcond=None)[0]
        _, sv, Vt = np.linalg.svd(A)
        null = Vt[int((sv > 1e-10).sum()):]
        z = z0 + null.T @ rng.normal(size=null.shape[0])
        xi = rng.normal(size=(100, model.xi_dim))
        inj = total_injection(model, bal.layout.unpack(z), xi)
        assert np.abs(inj).max() <= 1e-8


class TestAffinePolicy:
    def test_rejects_entries_outside_mask(self):
        mask = causality_mask(1, 2, 1)
        with pytest.raises(ValueError, match="causal"):
            AffinePolicy((np.eye(2),), (np.zeros(2),), (mask,))

    def test_pack_unpack_roundtrip(self):
        model = validate_case(random_case(np.random.default_rng(11)))
        lay = PolicyLayout.for_model(model)
        z = np.random.default_rng(0).normal(size=lay.size)
        assert_array_equal(lay.pack(lay.unpack(z)), z)

    def test_masked_entries_exactly_zero(self):
        model = validate_case(random_case(np.random.default_rng(5)))
        lay = PolicyLayout.for_model(model)
        pol = lay.unpack(np.ones(lay.size))
        for D, mask in zip(pol.D, pol.masks):
            assert np.all(D[~mask] == 0.0)
