import math

import numpy as np
import pytest

from stshared.gmrf import factorize, rng_from, sample_constrained, GmrfDensity
from stshared.graphs import icar_structure, interaction_structure, lattice_graph, path_graph, rw1_structure
from stshared.model import (
    HyperParams,
    ModelSpec,
    ScalingBlocks,
    TAU_EPS,
    build_qx,
    build_structures,
    build_z3,
    check_scaling_identifiability,
    constraints_for,
    design_matrix,
    expand_rho,
    hyper_from_vector,
    hyper_names,
    hyper_to_vector,
    layout,
    linear_predictor,
    log_prior,
    prior_precision,
)

MODEL_11 = ModelSpec(family="independent", interaction="I")
MODEL_2 = ModelSpec(family="shared_single", interaction="I")


def model3(sizes=(3, 3, 3), interaction="I", extras="none"):
    return ModelSpec(family="shared_flexible", interaction=interaction,
                     blocks=ScalingBlocks(sizes), spatial_extras=extras)


def hyper_for(spec, T, rho=None, **kw):
    base = dict(tau_kappa=35.7, tau_gamma_I=200.0, tau_gamma_M=120.0, delta=0.9)
    if spec.shared:
        n = spec.n_rho(T)
        base.update(tau_chi=80.0, rho=tuple(rho) if rho is not None else (1.4,) * n)
    else:
        base.update(tau_chi_I=400.0, tau_chi_M=550.0)
    if spec.spatial_extras == "mortality_unstructured":
        base.update(tau_u=50.0)
    elif spec.spatial_extras == "both_separate":
        base.update(tau_u=50.0, tau_v=60.0)
    elif spec.spatial_extras == "both_shared_variance":
        base.update(tau_w=70.0)
    base.update(kw)
    return HyperParams(**base)


class TestLayout:
    def test_model11_length(self):
        lay = layout(MODEL_11, A=3, T=2)
        assert lay.total == 2 + 3 + 4 + 12 == 21

    def test_model32_length(self):
        spec = ModelSpec(family="shared_flexible", interaction="I",
                         blocks=ScalingBlocks((1, 1)),
                         spatial_extras="mortality_unstructured")
        lay = layout(spec, A=3, T=2)
        assert lay.total == 2 + 3 + 3 + 4 + 2 * 6 == 24

    def test_shared_variance_adds_2a(self):
        spec = ModelSpec(family="independent", interaction="I",
                         spatial_extras="both_shared_variance")
        lay = layout(spec, A=4, T=2)
        assert lay.slices["w"].stop - lay.slices["w"].start == 8

    def test_block_sum_mismatch(self):
        with pytest.raises(ValueError, match="blocks sum"):
            layout(model3((2, 2)), A=3, T=5)

    def test_blocks_nonoverlapping(self):
        lay = layout(model3(extras="both_separate"), A=4, T=9)
        stops = [s.stop for s in lay.slices.values()]
        starts = [s.start for s in lay.slices.values()]
        assert starts == [0] + stops[:-1]
        assert stops[-1] == lay.total


class TestZ3:
    def test_unit_scaling_identity(self):
        z3 = build_z3(ScalingBlocks((4,)), [1.0], A=3)
        np.testing.assert_array_equal(z3, np.ones(12))

    def test_scenario3_block_structure(self):
        z3 = build_z3(ScalingBlocks((3, 3, 3)), [1.0, 1.4, 1.8], A=1)
        np.testing.assert_array_equal(
            z3, [1.0, 1.0, 1.0, 1.4, 1.4, 1.4, 1.8, 1.8, 1.8]
        )

    def test_reciprocal_inverse(self):
        rng = rng_from(1)
        rho = rng.uniform(0.5, 2.0, size=3)
        z3 = build_z3(ScalingBlocks((2, 3, 4)), rho, A=5)
        assert np.abs(z3 * (1.0 / z3) - 1.0).max() <= 5e-16

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            build_z3(ScalingBlocks((2,)), [-1.0], A=2)


class TestBuildQx:
    def test_scalar_case_hand_value(self):
        from stshared.graphs import identity_structure

        q_chi = identity_structure(1)
        qx = build_qx(ScalingBlocks((1,)), [2.0], tau_chi=1.0,
                      tau_eps=math.e ** 15, q_chi=q_chi)
        e15 = math.e ** 15
        expected = np.array([[0.25 + e15 / 16, -e15 / 4], [-e15 / 4, e15]])
        np.testing.assert_allclose(qx.toarray(), expected, rtol=1e-14)

    def test_unit_scaling_collapses(self):
        q_chi = interaction_structure("IV", rw1_structure(3), icar_structure(path_graph(3)))
        tau_chi, tau_eps = 80.0, TAU_EPS
        qx = build_qx(ScalingBlocks((3,)), [1.0], tau_chi, tau_eps, q_chi)
        q = q_chi.toarray()
        ta = q.shape[0]
        full = qx.toarray()
        np.testing.assert_allclose(full[:ta, :ta], (tau_chi + tau_eps) * q, rtol=1e-12)
        np.testing.assert_allclose(full[:ta, ta:], -tau_eps * q, rtol=1e-12)

    @pytest.mark.parametrize("kind", ["I", "II", "III", "IV"])
    def test_quadratic_form_identity(self, kind):
        rng = rng_from(99)
        for _ in range(6):
            A = int(rng.integers(2, 6))
            T = int(rng.integers(2, 5))
            r_g = rw1_structure(T)
            r_k = icar_structure(lattice_graph(1, A))
            q_chi = interaction_structure(kind, r_g, r_k)
            sizes = (T,) if T < 3 else (1, T - 1)
            blocks = ScalingBlocks(sizes)
            rho = rng.uniform(0.5, 2.0, size=blocks.l)
            tau_chi = float(rng.uniform(10, 100))
            qx = build_qx(blocks, rho, tau_chi, TAU_EPS, q_chi)
            z = rng.standard_normal(T * A)
            zs = rng.standard_normal(T * A)
            x = np.concatenate([z, zs])
            lhs = x @ (qx.entries @ x)
            d = 1.0 / build_z3(blocks, rho, A)
            q = q_chi.toarray()
            resid = zs - d * d * z
            rhs = tau_chi * (d * z) @ q @ (d * z) + TAU_EPS * resid @ q @ resid
            assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_symmetry_and_null_dim(self):
        q_chi = interaction_structure("II", rw1_structure(3), icar_structure(path_graph(2)))
        qx = build_qx(ScalingBlocks((1, 2)), [0.7, 1.3], 80.0, TAU_EPS, q_chi)
        arr = qx.toarray()
        np.testing.assert_array_equal(arr, arr.T)
        assert qx.null_dim == 2 * q_chi.null_dim
        assert np.abs(arr @ qx.null_basis).max() < 1e-6 * np.abs(arr).max()


class TestConstraints:
    def test_type4_row_count(self):
        c = constraints_for(model3((1, 1, 1), interaction="IV"), A=3, T=3)
        # kappa 1 + gammas 2 + (3+3-1) per interaction field
        assert c.rank == 1 + 2 + 2 * 5

    def test_type1_single_interaction_row(self):
        c = constraints_for(MODEL_11, A=4, T=3)
        assert c.rank == 1 + 2 + 2 * 1

    @pytest.mark.parametrize("kind", ["II", "III", "IV"])
    def test_augmented_precision_positive_definite(self, kind):
        spec = model3((2, 2), interaction=kind)
        graph = lattice_graph(2, 2)
        structures = build_structures(graph, 4, spec)
        h = hyper_for(spec, 4, rho=(0.8, 1.6))
        q = prior_precision(spec, h, structures)
        c = constraints_for(spec, 4, 4)
        w = float(q.diagonal().max())
        import scipy.sparse as sp

        q_aug = sp.csc_array(q + w * sp.csc_array(c.rows.T @ c.rows))
        f = factorize(q_aug)
        assert f.jitter == 0.0

    def test_interaction_null_space_killed(self):
        # eigen oracle: augmented interaction block has trivial null space
        for kind in ("II", "III", "IV"):
            spec = ModelSpec(family="independent", interaction=kind)
            q_chi = interaction_structure(
                "I" if kind == "I" else kind, rw1_structure(3),
                icar_structure(path_graph(3)))
            from stshared.model import _interaction_rows

            rows = _interaction_rows(kind, 3, 3, np.zeros(3, dtype=int))
            aug = q_chi.toarray() + rows.T @ rows
            w = np.linalg.eigvalsh(aug)
            assert w.min() > 1e-10

    def test_disconnected_graph_extra_rows(self):
        labels = np.array([0, 0, 1, 1])
        c = constraints_for(MODEL_11, A=4, T=3, component_labels=labels)
        # kappa: 2 component rows; gammas: 2; interaction: 1 per field
        assert c.rank == 2 + 2 + 2


class TestLogPrior:
    def test_gamma_at_one(self):
        spec = MODEL_2
        h = hyper_for(spec, 3, rho=(1.0,), delta=1.0)
        expected_gamma = 10 * math.log(10) - math.lgamma(10) - 10
        # delta and rho_1 both at 1 contribute the same Gamma term
        base = log_prior(h, spec, T=3)
        h2 = hyper_for(spec, 3, rho=(1.0,), delta=math.e)
        with_shift = log_prior(h2, spec, T=3)
        # moving delta off 1 changes only its Gamma term
        assert base - with_shift == pytest.approx(
            expected_gamma - (10 * math.log(10) - math.lgamma(10) + 10 - 10 * math.e)
        )

    def test_gamma_prior_moments(self):
        rng = rng_from(8)
        draws = rng.gamma(shape=10.0, scale=1.0 / 10.0, size=200_000)
        assert draws.mean() == pytest.approx(1.0, abs=3 * draws.std() / np.sqrt(draws.size))
        assert draws.var() == pytest.approx(0.1, rel=0.05)

    def test_sigma_above_bound_rejected(self):
        spec = MODEL_11
        h = hyper_for(spec, 3, tau_kappa=1e-12)  # sigma = 1e6 > 1e3
        assert log_prior(h, spec, T=3) == -math.inf

    def test_tau_eps_not_free(self):
        h = hyper_for(MODEL_2, 3, rho=(1.4,))
        assert h.tau_eps == pytest.approx(math.exp(15.0))


class TestLinearPredictor:
    def test_zero_latent_gives_intercepts(self):
        spec = MODEL_11
        lay = layout(spec, 3, 2)
        h = hyper_for(spec, 2)
        x = np.zeros(lay.total)
        x[lay.slices["alpha_I"]] = -8.9
        x[lay.slices["alpha_M"]] = -9.3
        eta_i, eta_m = linear_predictor(spec, lay, x, h)
        np.testing.assert_allclose(eta_i, -8.9)
        np.testing.assert_allclose(eta_m, -9.3)

    def test_copy_identity_shares_interaction(self):
        spec = MODEL_2
        lay = layout(spec, 2, 2)
        h = hyper_for(spec, 2, rho=(1.0,))
        rng = rng_from(4)
        x = np.zeros(lay.total)
        zvals = rng.standard_normal(4)
        x[lay.slices["z"]] = zvals
        x[lay.slices["z_star"]] = zvals
        eta_i, eta_m = linear_predictor(spec, lay, x, h)
        np.testing.assert_allclose(eta_i, eta_m)

    def test_delta_scaling_reciprocal(self):
        spec = MODEL_11
        lay = layout(spec, 3, 2)
        rng = rng_from(5)
        x = np.zeros(lay.total)
        x[lay.slices["kappa"]] = rng.standard_normal(3)
        h1 = hyper_for(spec, 2, delta=0.9)
        h2 = hyper_for(spec, 2, delta=2.7)
        ei1, em1 = linear_predictor(spec, lay, x, h1)
        ei2, em2 = linear_predictor(spec, lay, x, h2)
        np.testing.assert_allclose(ei2, ei1 * 3.0, atol=1e-12)
        np.testing.assert_allclose(em2, em1 / 3.0, atol=1e-12)


class TestIdentifiability:
    def test_table_values(self):
        assert check_scaling_identifiability([1.0, 1.4, 1.8])

    def test_single_pair(self):
        assert check_scaling_identifiability([0.5])

    def test_random_vector(self):
        rng = rng_from(6)
        assert check_scaling_identifiability(rng.uniform(0.1, 10.0, size=7))


class TestNesting:
    def test_flexible_l1_matches_single(self):
        graph = lattice_graph(2, 2)
        T = 3
        single = MODEL_2
        flexible = ModelSpec(family="shared_flexible", interaction="I",
                             blocks=ScalingBlocks((T,)))
        s1 = build_structures(graph, T, single)
        s2 = build_structures(graph, T, flexible)
        h1 = hyper_for(single, T, rho=(1.4,))
        h2 = hyper_for(flexible, T, rho=(1.4,))
        q1 = prior_precision(single, h1, s1)
        q2 = prior_precision(flexible, h2, s2)
        assert (q1 != q2).nnz == 0
        np.testing.assert_array_equal(q1.toarray(), q2.toarray())


class TestCopyCloseness:
    def test_zstar_tracks_z_as_tau_eps_grows(self):
        spec = MODEL_2
        graph = path_graph(3)
        T = 3
        structures = build_structures(graph, T, spec)
        c = constraints_for(spec, 3, T)
        gaps = []
        for log_tau_eps in (5.0, 10.0, 15.0):
            h = HyperParams(tau_kappa=35.7, tau_gamma_I=200.0, tau_gamma_M=120.0,
                            delta=0.9, tau_chi=80.0, rho=(1.0,),
                            tau_eps=math.exp(log_tau_eps))
            q = prior_precision(spec, h, structures)
            from stshared.graphs import _make_structure

            s = _make_structure(q.tocsr(), rank=q.shape[0], generators=np.zeros((q.shape[0], 0)))
            g = GmrfDensity(s, 1.0)
            draws = sample_constrained(g, c, rng_from(17), size=200)
            lay = layout(spec, 3, T)
            gap = np.abs(draws[:, lay.slices["z"]] - draws[:, lay.slices["z_star"]]).max()
            gaps.append(gap)
        assert gaps[0] > gaps[1] > gaps[2]


class TestSerialization:
    def test_roundtrip(self):
        spec = model3((2, 3, 4), interaction="IV", extras="both_separate")
        again = ModelSpec.from_json(spec.to_json())
        assert again == spec

    def test_hyper_vector_roundtrip(self):
        spec = model3()
        h = hyper_for(spec, 9, rho=(1.0, 1.4, 1.8))
        theta = hyper_to_vector(h, spec, 9)
        assert len(theta) == len(hyper_names(spec, 9)) == 8
        back = hyper_from_vector(theta, spec, 9)
        assert back.rho == pytest.approx(h.rho)
        assert back.tau_kappa == pytest.approx(h.tau_kappa)


def test_design_matrix_shape_and_sparsity():
    spec = model3(extras="both_shared_variance")
    lay = layout(spec, 4, 9)
    h = hyper_for(spec, 9, rho=(1.0, 1.4, 1.8))
    m = design_matrix(spec, lay, h)
    assert m.shape == (2 * 36, lay.total)
    # each predictor row touches alpha, kappa, w, gamma, interaction
    assert m.nnz == 2 * 36 * 5
