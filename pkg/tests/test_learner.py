import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpv_mhe_mpc.experiment import ExperimentConfig, initial_theta
from lpv_mhe_mpc.learner import (
    CRITIC_RIDGE,
    CriticParams,
    CriticRejected,
    LstdAccumulators,
    Transition,
    critic_solve,
    features_psi,
    features_upsilon,
    fit_critic,
    jacobian_xi,
    lstd_accumulate,
    n_upsilon,
    policy_update,
    sample_floor,
    stage_cost,
)
from lpv_mhe_mpc.mhe import MheSolution
from lpv_mhe_mpc.mpc import MpcSolution
from lpv_mhe_mpc.verification import check_lstd, check_xi, random_transitions, reference_accumulate

GAMMA = 0.95


@pytest.fixture(scope="module")
def theta():
    return initial_theta(ExperimentConfig())


def fake_pair(theta, rng, zero_mhe=False):
    mpc_idx = np.setdiff1d(np.arange(theta.size), theta.indices(("L_A", "L_R")))
    mpc = MpcSolution(
        np.array([0.1]), np.zeros((11, 2)), np.zeros((10, 1)), np.zeros((11, 0)),
        rng.normal(size=(1, mpc_idx.size)), rng.normal(size=(1, 2)), rng.normal(size=(1, 11, 4)),
        "converged", True, 0.0, mpc_idx,
    )
    scale = 0.0 if zero_mhe else 1.0
    mhe = MheSolution(
        np.zeros((11, 2)), np.full((10, 4), 0.25), np.zeros((10, 1)), scale * rng.normal(size=(2, 4)),
        scale * rng.normal(size=(10, 4, 4)), "converged", True, 10, 0,
    )
    return mpc, mhe


class TestFeatures:
    def test_stage_cost(self):
        assert stage_cost(0.0, 0.0) == 0.0
        assert stage_cost(1.0, 0.0) == 1.0
        assert stage_cost(0.0, 2.0) == pytest.approx(0.4)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_stage_cost_even(self, y, a):
        assert stage_cost(y, a) == stage_cost(-y, -a)

    def test_upsilon(self):
        np.testing.assert_array_equal(features_upsilon([0.0, 0.0]), [1, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(features_upsilon([1.0, 2.0]), [1, 1, 2, 1, 2, 4])

    @given(st.integers(1, 6))
    def test_upsilon_count(self, n):
        assert features_upsilon(np.ones(n)).size == n_upsilon(n) == (n + 1) * (n + 2) // 2

    def test_psi(self):
        xi = np.array([[1.0], [-2.0], [0.5]])
        t = Transition(np.zeros(2), None, None, np.array([0.3]), np.array([0.3]), xi, 0.0, np.zeros(2))
        np.testing.assert_array_equal(features_psi(t), 0.0)
        t.a = np.array([0.5])
        np.testing.assert_allclose(features_psi(t), 0.2 * xi[:, 0])

    def test_on_policy_q_equals_v(self):
        rng = np.random.default_rng(0)
        critic = CriticParams(rng.normal(size=6), rng.normal(size=3))
        t = Transition(rng.normal(size=2), None, None, np.array([0.2]), np.array([0.2]),
                       rng.normal(size=(3, 1)), 0.0, np.zeros(2))
        assert critic.value(t.x_hat) + critic.w @ features_psi(t) == critic.value(t.x_hat)


class TestJacobianXi:
    def test_direct_block_without_estimator(self, theta):
        mpc, mhe = fake_pair(theta, np.random.default_rng(1), zero_mhe=True)
        source = np.arange(-1, 10)
        xi = jacobian_xi(mpc, mhe, theta, source)
        direct = np.zeros((1, theta.size))
        direct[:, mpc.theta_index] = mpc.dpi_dtheta
        assert xi.T.tobytes() == direct.tobytes()

    def test_single_chain_term(self, theta):
        mpc, mhe = fake_pair(theta, np.random.default_rng(2))
        mpc.dpi_dtheta[:] = 0.0
        mpc.dpi_dbeta[:] = 0.0
        mhe.dx_dtheta = np.hstack([np.eye(2), np.zeros((2, 2))])
        xi = jacobian_xi(mpc, mhe, theta, np.zeros(11, dtype=int), ["L_A"])
        np.testing.assert_array_equal(xi[:2, 0], mpc.dpi_dx[0])
        assert xi[2, 0] == 0.0

    def test_cold_start_ignores_schedule(self, theta):
        mpc, mhe = fake_pair(theta, np.random.default_rng(3))
        cold = jacobian_xi(mpc, mhe, theta, -np.ones(11, dtype=int), ["L_A", "L_R"])
        np.testing.assert_allclose(cold.T, mpc.dpi_dx @ mhe.dx_dtheta)

    def test_layout_mismatch(self, theta):
        mpc, mhe = fake_pair(theta, np.random.default_rng(4))
        mpc.dpi_dtheta = mpc.dpi_dtheta[:, :-1]
        with pytest.raises(ValueError):
            jacobian_xi(mpc, mhe, theta, np.zeros(11, dtype=int))

    @pytest.mark.slow
    def test_matches_composed_differences(self):
        res = check_xi(n_instances=3)
        assert res.passed, res.line()


class TestAccumulation:
    def test_empty_batch(self):
        acc = LstdAccumulators.zeros(6, 3)
        out = lstd_accumulate([], acc, GAMMA, CriticParams(np.ones(6), np.ones(3)))
        for a, b in zip((out.A_nu, out.b_nu, out.A_w, out.b_w, out.b_theta), (acc.A_nu, acc.b_nu, acc.A_w, acc.b_w, acc.b_theta)):
            np.testing.assert_array_equal(a, b)
        assert out.count == 0

    def test_single_transition(self):
        xi = np.array([[1.0], [2.0]])
        t = Transition(np.array([1.0, 0.0]), None, None, np.array([0.5]), np.array([0.0]), xi, 2.0,
                       np.array([0.0, 0.0]))
        nu, w = np.zeros(6), np.array([1.0, -1.0])
        acc = lstd_accumulate([t], LstdAccumulators.zeros(6, 2), GAMMA, CriticParams(nu, w))
        u0, u1 = np.array([1, 1, 0, 1, 0, 0.0]), np.array([1, 0, 0, 0, 0, 0.0])
        np.testing.assert_allclose(acc.A_nu, np.outer(u0, u0 - GAMMA * u1))
        np.testing.assert_allclose(acc.b_nu, 2.0 * u0)
        np.testing.assert_allclose(acc.A_w, [[0.25, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(acc.b_w, [1.0, 2.0])
        np.testing.assert_allclose(acc.b_theta, [-1.0, -2.0])
        assert acc.count == 1

    def test_matches_reference_loop(self):
        res = check_lstd()
        assert res.passed, res.line()

    def test_order_independent(self):
        rng = np.random.default_rng(5)
        batch = random_transitions(rng, 60)
        critic = CriticParams(rng.normal(size=6), rng.normal(size=5))
        a = lstd_accumulate(batch, LstdAccumulators.zeros(6, 5), GAMMA, critic)
        b = lstd_accumulate([batch[i] for i in rng.permutation(60)], LstdAccumulators.zeros(6, 5), GAMMA, critic)
        for x, y in zip((a.A_nu, a.b_nu, a.A_w, a.b_w, a.b_theta), (b.A_nu, b.b_nu, b.A_w, b.b_w, b.b_theta)):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_merge_equals_joint(self):
        rng = np.random.default_rng(6)
        batch = random_transitions(rng, 40)
        critic = CriticParams(rng.normal(size=6), rng.normal(size=5))
        z = LstdAccumulators.zeros(6, 5)
        joint = lstd_accumulate(batch, z, GAMMA, critic)
        split = lstd_accumulate(batch[:15], z, GAMMA, critic).merge(lstd_accumulate(batch[15:], z, GAMMA, critic))
        np.testing.assert_allclose(split.A_w, joint.A_w, atol=1e-12)
        assert (split.count, split.skipped) == (joint.count, joint.skipped)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(7)
        acc = lstd_accumulate(random_transitions(rng, 100), LstdAccumulators.zeros(6, 5), GAMMA,
                              CriticParams(np.zeros(6), np.zeros(5)))
        np.testing.assert_allclose(acc.A_w, acc.A_w.T, atol=1e-12)
        assert np.linalg.eigvalsh(acc.A_w).min() >= -1e-10

    def test_gradient_is_sample_mean(self):
        rng = np.random.default_rng(8)
        batch = random_transitions(rng, 100)
        w = rng.normal(size=5)
        acc = lstd_accumulate(batch, LstdAccumulators.zeros(6, 5), GAMMA, CriticParams(np.zeros(6), w))
        good = [t for t in batch if t.valid]
        mean = sum(t.xi @ t.xi.T @ w for t in good) / len(good)
        np.testing.assert_allclose(acc.b_theta / acc.count, mean, atol=1e-12)

    def test_invalid_skipped(self):
        rng = np.random.default_rng(9)
        batch = random_transitions(rng, 50)
        acc = lstd_accumulate(batch, LstdAccumulators.zeros(6, 5), GAMMA, CriticParams(np.zeros(6), np.zeros(5)))
        assert acc.count + acc.skipped == 50
        assert acc.skipped == sum(not t.valid for t in batch)


class TestCritic:
    def test_identity_system(self):
        acc = LstdAccumulators(np.eye(6), np.eye(6)[0], np.eye(3), np.eye(3)[0], np.zeros(3), count=60)
        c = critic_solve(acc)
        np.testing.assert_allclose(c.nu, np.eye(6)[0] / (1 + CRITIC_RIDGE), rtol=1e-14)
        np.testing.assert_allclose(c.w, np.eye(3)[0] / (1 + CRITIC_RIDGE), rtol=1e-14)
        assert c.ridge == CRITIC_RIDGE

    def test_sample_floor(self):
        assert sample_floor(6, 19) == 190
        acc = LstdAccumulators(np.eye(6), np.ones(6), np.eye(3), np.ones(3), np.zeros(3), count=59)
        with pytest.raises(CriticRejected):
            critic_solve(acc)

    def test_ill_conditioned_rejected(self):
        A = np.diag([1e14, 1.0, 1.0, 1.0, 1.0, 1e-3])
        acc = LstdAccumulators(A, np.ones(6), np.eye(3), np.ones(3), np.zeros(3), count=60)
        with pytest.raises(CriticRejected):
            critic_solve(acc)

    def test_duplicated_samples(self):
        rng = np.random.default_rng(10)
        batch = random_transitions(rng, 100, n_theta=3)
        c1, _ = fit_critic(batch, GAMMA, 6, 3)
        c2, _ = fit_critic(batch + batch, GAMMA, 6, 3)
        np.testing.assert_allclose(c2.nu, c1.nu, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(c2.w, c1.w, rtol=1e-4, atol=1e-8)

    def test_recovers_quadratic_value(self):
        rng = np.random.default_rng(11)
        P = np.array([[2.0, 0.3], [0.3, 1.0]])
        A = np.array([[0.9, 0.1], [-0.1, 0.8]])
        batch = []
        for _ in range(300):
            x = rng.uniform(-1, 1, 2)
            x1 = A @ x
            # L = V(x) - g V(x') makes V = x'Px the exact discounted value
            L = x @ P @ x - GAMMA * x1 @ P @ x1
            batch.append(Transition(x, None, None, np.array([0.1]), np.zeros(1), rng.normal(size=(2, 1)), L, x1))
        c, _ = fit_critic(batch, GAMMA, 6, 2)
        np.testing.assert_allclose(c.nu, [0, 0, 0, 2.0, 0.6, 1.0], atol=1e-3)

    def test_zero_exploration_rejected(self):
        rng = np.random.default_rng(12)
        batch = random_transitions(rng, 100, n_theta=3)
        for t in batch:
            t.pi = t.a.copy()
        with pytest.raises(CriticRejected):
            fit_critic(batch, GAMMA, 6, 3)

    def test_fit_matches_reference(self):
        rng = np.random.default_rng(13)
        batch = random_transitions(rng, 100, n_theta=3)
        critic, acc = fit_critic(batch, GAMMA, 6, 3)
        ref = reference_accumulate(batch, GAMMA, critic.nu, critic.w, 3, 6)
        np.testing.assert_allclose(acc.b_theta, ref[4], atol=1e-12)


class TestPolicyUpdate:
    def test_zero_step(self, theta):
        learned = ["f"]
        for alpha, b in [(0.0, np.ones(3)), (1e-3, np.zeros(3))]:
            res = policy_update(theta, b, alpha, 10, learned)
            np.testing.assert_array_equal(res.theta.values, theta.values)
            assert not res.rejected

    def test_mean_step(self, theta):
        res = policy_update(theta, np.array([1.0, 2.0, 3.0]), 0.1, 10, ["f"])
        np.testing.assert_allclose(res.theta["f"], theta["f"] - 0.01 * np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(res.theta["L_W"], theta["L_W"])

    def test_projection(self, theta):
        res = policy_update(theta, np.array([1e6, 0.0, 0.0]), 1.0, 1, ["L_W"])
        assert res.theta["L_W"][0] == 1e-4

    def test_halving(self, theta):
        calls = []

        def probe(th):
            calls.append(th)
            return len(calls) > 2

        res = policy_update(theta, np.ones(3), 0.4, 1, ["f"], probe)
        assert res.alpha == pytest.approx(0.1) and res.tries == 3 and not res.rejected

    def test_all_probes_fail(self, theta):
        res = policy_update(theta, np.ones(3), 0.4, 1, ["f"], lambda th: False)
        assert res.rejected and res.tries == 4
        np.testing.assert_array_equal(res.theta.values, theta.values)

    def test_bad_gradient(self, theta):
        with pytest.raises(ValueError):
            policy_update(theta, np.array([np.nan, 0, 0]), 0.1, 1, ["f"])
        with pytest.raises(ValueError):
            policy_update(theta, np.ones(2), 0.1, 1, ["f"])


def scalar_return(k, x0s, T=30):
    """Discounted return of x' = x + 0.5 u, u = -k x, L = x^2 + 0.1 u^2."""
    total = 0.0
    for x in x0s:
        for t in range(T):
            u = -k * x
            total += GAMMA**t * (x * x + 0.1 * u * u)
            x = x + 0.5 * u
    return total / len(x0s)


class TestGradientDirection:
    def test_sign_agrees_with_return_differences(self):
        rng = np.random.default_rng(14)
        agree = 0
        for trial in range(20):
            k = rng.uniform(0.3, 1.9)
            x0s = rng.uniform(-1, 1, 10)
            batch = []
            for x in x0s:
                for t in range(30):
                    pi = -k * x
                    a = pi + 0.1 * rng.normal()
                    x1 = x + 0.5 * a
                    batch.append(Transition(np.array([x]), None, None, np.array([a]), np.array([pi]),
                                            np.array([[-x]]), x * x + 0.1 * a * a, np.array([x1])))
                    x = x1
            _, acc = fit_critic(batch, GAMMA, 3, 1)
            fd = (scalar_return(k + 1e-4, x0s) - scalar_return(k - 1e-4, x0s)) / 2e-4
            agree += np.sign(acc.b_theta[0]) == np.sign(fd)
        assert agree >= 18
