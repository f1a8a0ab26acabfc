import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpv_mhe_mpc.lpv_plant import (
    LtiVertex,
    PolytopicModel,
    SchedulingBounds,
    check_beta,
    combine,
    discretize,
    msd_matrices,
    msd_vertices,
    plant_step,
    sample_schedule,
    true_beta,
    uniform_beta,
)

simplex = st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4).map(lambda v: np.array(v) / sum(v))


class TestVertices:
    def test_design_vertices(self):
        model = msd_vertices(SchedulingBounds.msd((1, 2), (0, 0.5)))
        expected = [
            [[0, 1], [-1, 0]],
            [[0, 1], [-1, -0.5]],
            [[0, 1], [-2, 0]],
            [[0, 1], [-2, -0.5]],
        ]
        np.testing.assert_array_equal(model.A, expected)
        for v in model.vertices:
            np.testing.assert_array_equal(v.B, [[0], [1]])
            np.testing.assert_array_equal(v.C, [[1, 0]])
        assert model.time_domain == "continuous"

    def test_true_bounds_corners(self):
        model = msd_vertices(SchedulingBounds.msd((0.5, 2), (0, 0.2)))
        assert sorted({a[1, 0] for a in model.A}) == [-2.0, -0.5]
        assert sorted({a[1, 1] for a in model.A}) == [-0.2, 0.0]

    def test_zero_width_box(self):
        model = msd_vertices(SchedulingBounds.msd((1.5, 1.5), (0.1, 0.1)))
        for a in model.A[1:]:
            np.testing.assert_array_equal(a, model.A[0])

    def test_mass_scales(self):
        A, B = msd_matrices(2.0, 1.0, 4.0)
        np.testing.assert_allclose(A, [[0, 1], [-0.5, -0.25]])
        np.testing.assert_allclose(B, [[0], [0.25]])

    @pytest.mark.parametrize("kwargs", [dict(mass=0.0), dict(mass=-1.0), dict(k=(2, 1))])
    def test_invalid_bounds(self, kwargs):
        with pytest.raises(ValueError):
            SchedulingBounds.msd(**kwargs)

    def test_mismatched_vertices_rejected(self):
        a = LtiVertex(np.eye(2), np.ones((2, 1)), np.ones((1, 2)))
        b = LtiVertex(np.eye(3), np.ones((3, 1)), np.ones((1, 3)))
        with pytest.raises(ValueError):
            PolytopicModel((a, b))

    def test_vertex_count_matches_scheduling(self):
        a = LtiVertex(np.eye(2), np.ones((2, 1)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            PolytopicModel((a, a, a), n_scheduling=2)


class TestCombine:
    def test_one_hot(self, design_model):
        A, B, C = combine(design_model, [0, 0, 1, 0])
        np.testing.assert_array_equal(A, design_model.A[2])

    def test_uniform(self):
        model = msd_vertices(SchedulingBounds.msd())
        A, _, _ = combine(model, uniform_beta(4))
        np.testing.assert_allclose(A, [[0, 1], [-1.5, -0.25]], atol=1e-15)

    def test_singleton(self):
        v = LtiVertex(np.eye(2), np.ones((2, 1)), np.ones((1, 2)))
        A, B, C = combine(PolytopicModel((v,)), [1.0])
        np.testing.assert_array_equal(A, np.eye(2))

    @pytest.mark.parametrize("beta", [[0.5, 0.5, 0.1, 0.0], [1.0, 0.0, 0.0], [1.1, -0.1, 0, 0]])
    def test_invalid_beta(self, design_model, beta):
        with pytest.raises(ValueError):
            combine(design_model, beta)

    def test_simplex_tolerances(self):
        check_beta([1 + 5e-9, 0, 0, -5e-10])
        with pytest.raises(ValueError):
            check_beta([1 + 2e-8, 0, 0, 0])
        with pytest.raises(ValueError):
            check_beta([1 + 2e-9, 0, 0, -2e-9])

    @given(simplex, simplex, st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_linear_in_beta(self, b1, b2, a):
        model = msd_vertices(SchedulingBounds.msd())
        mix = combine(model, a * b1 + (1 - a) * b2)
        parts = [a * x + (1 - a) * y for x, y in zip(combine(model, b1), combine(model, b2))]
        for m, p in zip(mix, parts):
            np.testing.assert_allclose(m, p, atol=1e-12)


class TestDiscretize:
    def test_euler_vertex_one(self, design_model):
        np.testing.assert_allclose(design_model.A[0], [[1, 0.05], [-0.05, 1]])
        np.testing.assert_allclose(design_model.B[0], [[0], [0.05]])
        assert design_model.time_domain == "discrete"

    def test_zero_dynamics(self):
        v = LtiVertex(np.zeros((2, 2)), np.zeros((2, 1)), np.ones((1, 2)))
        d = discretize(PolytopicModel((v,)), 0.3)
        np.testing.assert_array_equal(d.A[0], np.eye(2))
        np.testing.assert_array_equal(d.B[0], np.zeros((2, 1)))

    @pytest.mark.parametrize("h", [0.0, -0.1])
    def test_bad_step(self, h):
        with pytest.raises(ValueError):
            discretize(msd_vertices(SchedulingBounds.msd()), h)

    def test_already_discrete(self, design_model):
        with pytest.raises(ValueError):
            discretize(design_model, 0.05)

    @given(simplex)
    @settings(max_examples=50, deadline=None)
    def test_commutes_with_combination(self, beta):
        cont = msd_vertices(SchedulingBounds.msd())
        Ac, Bc, _ = combine(cont, beta)
        Ad, Bd, _ = combine(discretize(cont, 0.05), beta)
        np.testing.assert_allclose(Ad, np.eye(2) + 0.05 * Ac, atol=1e-12)
        np.testing.assert_allclose(Bd, 0.05 * Bc, atol=1e-12)


class TestPlant:
    def test_equilibrium(self):
        np.testing.assert_array_equal(plant_step(np.zeros(2), 0.0, (1.5, 0.1), 0.05), np.zeros(2))

    def test_harmonic_oscillator(self):
        x = plant_step([1.0, 0.0], 0.0, (1.0, 0.0), 0.05)
        # RK4 local error is O(h^5) ~ 3e-7 * 1/120
        np.testing.assert_allclose(x, [np.cos(0.05), -np.sin(0.05)], atol=1e-8)

    def test_zero_step(self):
        x = np.array([0.3, -0.7])
        np.testing.assert_array_equal(plant_step(x, 2.0, (1, 0.2), 0.0), x)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            plant_step([np.nan, 0.0], 0.0, (1, 0), 0.05)

    def test_energy_conserved_undamped(self):
        k = 1.7
        x = np.array([0.8, -0.2])
        e0 = 0.5 * x[1] ** 2 + 0.5 * k * x[0] ** 2
        for _ in range(200):
            x = plant_step(x, 0.0, (k, 0.0), 0.05)
        e1 = 0.5 * x[1] ** 2 + 0.5 * k * x[0] ** 2
        assert abs(e1 - e0) / e0 < 1e-6

    def test_unbounded_input_accepted(self):
        x = plant_step(np.zeros(2), 50.0, (1, 0), 0.05)
        assert x[1] > 1.0


class TestSchedule:
    def test_deterministic(self):
        b = SchedulingBounds.msd((0.5, 2), (0, 0.2))
        for mode in ("constant-per-episode", "piecewise-constant", "sinusoidal-drift"):
            s1 = sample_schedule(b, mode, 300, seed=4)
            s2 = sample_schedule(b, mode, 300, seed=4)
            np.testing.assert_array_equal(s1.samples, s2.samples)
            assert s1.samples.shape == (300, 2)
            assert np.all(s1.samples >= b.lower) and np.all(s1.samples <= b.upper)

    def test_constant_mode_is_constant(self):
        s = sample_schedule(SchedulingBounds.msd(), "constant-per-episode", 20, seed=1).samples
        assert np.all(s == s[0])

    def test_zero_width(self):
        b = SchedulingBounds.msd((1.2, 1.2), (0.3, 0.3))
        s = sample_schedule(b, "sinusoidal-drift", 50, seed=0).samples
        assert np.all(s == [1.2, 0.3])

    def test_many_draws_in_bounds(self):
        b = SchedulingBounds.msd((0.5, 2), (0, 0.2))
        draws = np.array([sample_schedule(b, horizon=1, seed=s).samples[0] for s in range(10_000)])
        assert np.all(draws.min(0) >= b.lower) and np.all(draws.max(0) <= b.upper)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            sample_schedule(SchedulingBounds.msd(), "random-walk", 10)

    def test_horizon_positive(self):
        with pytest.raises(ValueError):
            sample_schedule(SchedulingBounds.msd(), horizon=0)


class TestTrueBeta:
    def test_corner_and_center(self):
        b = SchedulingBounds.msd()
        np.testing.assert_array_equal(true_beta([2.0, 0.0], b), [0, 0, 1, 0])
        np.testing.assert_allclose(true_beta([1.5, 0.25], b), uniform_beta(4))

    def test_outside(self):
        with pytest.raises(ValueError):
            true_beta([3.0, 0.1], SchedulingBounds.msd())

    def test_zero_width_dimension(self):
        b = SchedulingBounds.msd((1, 2), (0.1, 0.1))
        np.testing.assert_allclose(true_beta([1.5, 0.1], b), [0.5, 0, 0.5, 0])

    def test_reconstruction_identity(self):
        b = SchedulingBounds.msd((0.5, 2), (0, 0.2))
        model = msd_vertices(b)
        rng = np.random.default_rng(0)
        for rho in rng.uniform(b.lower, b.upper, size=(1000, 2)):
            A, _, _ = combine(model, true_beta(rho, b))
            np.testing.assert_allclose(A, msd_matrices(rho[0], rho[1], 1.0)[0], atol=1e-12)
