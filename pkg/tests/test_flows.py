"""Flow drifts, algebraic identities, the adaptive integrator, trajectory IO."""

import numpy as np
import pytest

from conftest import make_linear_case, random_spd
from ekirod.errors import (
    ConfigurationError,
    EvaluationError,
    InputOutputError,
    ParseError,
    StiffnessError,
)
from ekirod.flows import (
    FlowConfig,
    Trajectory,
    integrate,
    rhs_plain,
    rhs_regularised,
    rhs_variance_inflated,
    rhs_variance_inflated_expanded,
)
from ekirod.problem import (
    InverseProblem,
    NoiseModel,
    PriorModel,
    augment,
    potential,
    whiten,
)


def scalar_problem(with_prior: bool, alpha: float = 1.0) -> InverseProblem:
    return InverseProblem(
        forward=lambda u: u.copy(),
        data=np.zeros(1),
        noise=NoiseModel.identity(1),
        prior=PriorModel(np.eye(1), alpha=alpha) if with_prior else None,
        dim_input=1,
        dim_output=1,
    )


class TestFlowConfig:
    def test_defaults_are_valid(self):
        FlowConfig(t_end=1.0)

    @pytest.mark.parametrize(
        "kwargs, match",
        [
            (dict(t_end=0.0), "t_end"),
            (dict(t_end=1.0, variant="kalman"), "variant"),
            (dict(t_end=1.0, rho=1.0), "rho"),
            (dict(t_end=1.0, rho=-0.1), "rho"),
            (dict(t_end=1.0, rel_tol=0.0), "rel_tol"),
            (dict(t_end=1.0, min_step=1.0, max_step=0.5), "max_step"),
            (dict(t_end=1.0, initial_step=-1e-3), "initial_step"),
            (dict(t_end=1.0, samples_per_decade=0), "samples_per_decade"),
            (dict(t_end=1.0, first_sample=2.0), "first_sample"),
            (dict(t_end=1.0, failure_policy="ignore"), "failure_policy"),
        ],
    )
    def test_rejects_bad_settings(self, kwargs, match):
        with pytest.raises(ConfigurationError, match=match):
            FlowConfig(**kwargs)


class TestDriftHandValues:
    # Two particles at -1 and +1, identity map, y = 0: Cug = Cu = 2.
    PARTICLES = np.array([[-1.0], [1.0]])

    def test_plain(self):
        out = rhs_plain(self.PARTICLES, scalar_problem(with_prior=False))
        assert np.array_equal(out, [[2.0], [-2.0]])

    def test_regularised_adds_anchor_term(self):
        out = rhs_regularised(self.PARTICLES, scalar_problem(with_prior=True))
        assert np.array_equal(out, [[4.0], [-4.0]])

    def test_inflated_at_half(self):
        # Mean misfit and mean anchor both vanish here, so rho = 1/2 just
        # halves each term: (2 + 2) / 2 per particle.
        out = rhs_variance_inflated(
            self.PARTICLES, scalar_problem(with_prior=True), rho=0.5
        )
        assert np.allclose(out, [[2.0], [-2.0]], rtol=1e-15)

    def test_identical_particles_freeze(self):
        # 0.75 is dyadic, so the ensemble mean of three copies is exact and
        # the deviations vanish bitwise rather than to rounding error.
        u = np.full((3, 1), 0.75)
        problem = scalar_problem(with_prior=True)
        assert not rhs_regularised(u, problem).any()
        assert not rhs_variance_inflated(u, problem, rho=0.3).any()

    def test_exact_fit_in_kernel_direction(self):
        # Particles differ only along ker(A), so every prediction matches
        # the data and the plain drift vanishes identically.
        a = np.array([[1.0, 0.0]])
        problem = InverseProblem(
            forward=lambda u: a @ u, data=np.array([0.4]),
            noise=NoiseModel.identity(1), prior=None,
            dim_input=2, dim_output=1,
        )
        u = np.array([[0.4, -1.0], [0.4, 0.0], [0.4, 2.0]])
        assert not rhs_plain(u, problem).any()

    def test_pure_regulariser_matches_matrix_formula(self):
        rng = np.random.default_rng(21)
        u = rng.standard_normal((5, 3))
        problem = InverseProblem(
            forward=lambda v: np.zeros(2), data=np.zeros(2),
            noise=NoiseModel.identity(2),
            prior=PriorModel(np.eye(3), alpha=1.0),
            dim_input=3, dim_output=2,
        )
        du = u - u.mean(axis=0)
        cu = du.T @ du / 4
        expect = -(u @ cu.T)
        assert np.allclose(rhs_regularised(u, problem), expect,
                           rtol=1e-13, atol=1e-15)


class TestDriftIdentities:
    def test_inflated_at_zero_rho_is_bitwise_regularised(self):
        case = make_linear_case(seed=5, d=3, n_obs=7, n_ens=4, alpha=0.7,
                                exact_data=False)
        u = case.initial
        a = rhs_regularised(u, case.problem)
        b = rhs_variance_inflated(u, case.problem, rho=0.0)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("rho", [0.0, 0.25, 0.9])
    def test_inflated_two_forms_agree(self, rho):
        rng = np.random.default_rng(17)
        a = rng.standard_normal((7, 3))
        problem = InverseProblem(
            forward=lambda u: a @ u,
            data=rng.standard_normal(7),
            noise=NoiseModel.from_matrix(random_spd(rng, 7)),
            prior=PriorModel(random_spd(rng, 3), alpha=0.7),
            dim_input=3, dim_output=7,
        )
        u = rng.standard_normal((4, 3))
        convex = rhs_variance_inflated(u, problem, rho=rho)
        expanded = rhs_variance_inflated_expanded(u, problem, rho=rho)
        assert np.abs(convex - expanded).max() <= 1e-12

    def test_mean_drift_is_rho_invariant(self):
        # Averaging over particles cancels the recentring terms exactly.
        case = make_linear_case(seed=6, d=2, n_obs=8, n_ens=5,
                                exact_data=False)
        u = case.initial
        base = rhs_regularised(u, case.problem).mean(axis=0)
        inflated = rhs_variance_inflated(u, case.problem, rho=0.7).mean(axis=0)
        assert np.allclose(inflated, base, rtol=1e-12, atol=1e-14)

    def test_plain_on_augmented_problem_is_regularised(self):
        case = make_linear_case(seed=7, d=3, n_obs=6, n_ens=4, alpha=0.4,
                                exact_data=False)
        u = case.initial
        via_augment = rhs_plain(u, augment(case.problem))
        direct = rhs_regularised(u, case.problem)
        assert np.abs(via_augment - direct).max() <= 1e-12

    def test_rejects_rho_outside_range(self):
        case = make_linear_case(seed=8)
        with pytest.raises(ConfigurationError, match="rho"):
            rhs_variance_inflated(case.initial, case.problem, rho=1.0)
        with pytest.raises(ConfigurationError, match="rho"):
            rhs_variance_inflated_expanded(case.initial, case.problem, rho=-0.2)

    def test_regulariser_variants_require_prior(self):
        problem = scalar_problem(with_prior=False)
        u = np.array([[-1.0], [1.0]])
        with pytest.raises(ConfigurationError, match="prior"):
            rhs_regularised(u, problem)
        with pytest.raises(ConfigurationError, match="prior"):
            rhs_variance_inflated(u, problem, rho=0.1)
        with pytest.raises(ConfigurationError, match="prior"):
            integrate(u, problem, FlowConfig(t_end=1.0))


class TestIntegrateConvergence:
    def test_reaches_closed_form_minimiser(self):
        case = make_linear_case(seed=0, d=2, n_obs=10, n_ens=3, op_scale=10.0)
        traj = integrate(case.initial, case.problem, FlowConfig(t_end=1e3))
        err = np.linalg.norm(traj.final_mean() - case.u_star)
        assert err <= 1e-2 * np.linalg.norm(case.u_star)

    def test_converges_to_span_restricted_minimiser(self):
        # Three particles in R^3 span a plane; the limit minimises the
        # potential over that plane in the Hessian metric, which differs
        # from both the global minimiser and the Euclidean projection.
        case = make_linear_case(seed=1, d=3, n_obs=10, n_ens=3, op_scale=10.0)
        a = case.operator
        hess = a.T @ a + np.eye(3)
        rhs = a.T @ case.problem.data
        u0_mean = case.initial.mean(axis=0)
        basis, _ = np.linalg.qr((case.initial - u0_mean).T)
        basis = basis[:, :2]
        coeff = np.linalg.solve(
            basis.T @ hess @ basis, basis.T @ (rhs - hess @ u0_mean)
        )
        oracle = u0_mean + basis @ coeff
        assert np.linalg.norm(oracle - case.u_star) > 0.1  # genuinely limited

        traj = integrate(case.initial, case.problem, FlowConfig(t_end=1e3))
        err = np.linalg.norm(traj.final_mean() - oracle)
        assert err <= 1e-2 * np.linalg.norm(oracle)

        # Particles never leave the initial affine span.
        away = np.eye(3) - basis @ basis.T
        for state in traj.states:
            leak = np.abs((state - u0_mean) @ away.T).max()
            assert leak < 1e-8

    def test_mean_potential_decreases(self):
        case = make_linear_case(seed=0, d=2, n_obs=10, n_ens=3, op_scale=10.0)
        traj = integrate(case.initial, case.problem, FlowConfig(t_end=1e3))
        r = traj.mean_residuals
        assert np.all(r[1:] <= r[:-1] * (1.0 + 1e-8))
        assert r[-1] <= 1.01 * potential(case.problem, case.u_star)

    def test_collapse_eigenvalue_scales_like_inverse_time(self):
        case = make_linear_case(seed=0, d=2, n_obs=10, n_ens=3, op_scale=10.0)
        traj = integrate(case.initial, case.problem, FlowConfig(t_end=1e3))
        window = traj.times >= 10.0
        product = traj.min_eigenvalues[window] * traj.times[window]
        assert product.min() > 1e-5
        # the product settles to a constant, not just a positive floor
        assert product.max() <= 5.0 * product.min()

    def test_identical_particles_stay_frozen(self):
        case = make_linear_case(seed=2)
        u0 = np.tile(np.array([0.25, -0.75]), (3, 1))  # dyadic, exact mean
        traj = integrate(u0, case.problem, FlowConfig(t_end=10.0))
        assert np.array_equal(
            traj.states, np.broadcast_to(u0, traj.states.shape)
        )
        assert np.array_equal(traj.spreads, np.zeros_like(traj.spreads))


class TestIntegratorAccounting:
    def test_every_forward_call_is_counted(self):
        case = make_linear_case(seed=3, op_scale=10.0)
        calls = {"n": 0}
        inner = case.problem.forward

        def counting(u):
            calls["n"] += 1
            return inner(u)

        problem = InverseProblem(
            forward=counting, data=case.problem.data,
            noise=case.problem.noise, prior=case.problem.prior,
            dim_input=2, dim_output=10,
        )
        cfg = FlowConfig(t_end=10.0, samples_per_decade=8)
        traj = integrate(case.initial, problem, cfg)
        assert calls["n"] == traj.n_rhs_evals + traj.n_diag_evals
        assert traj.n_rhs_evals == 6 * traj.n_ens * traj.n_steps_attempted
        assert traj.n_diag_evals == traj.n_ens * traj.times.size
        assert traj.n_steps_accepted <= traj.n_steps_attempted

    def test_diagnostic_grid_structure(self):
        cfg = FlowConfig(t_end=1e3, first_sample=1e-2, samples_per_decade=64)
        case = make_linear_case(seed=0, op_scale=10.0)
        traj = integrate(case.initial, case.problem, cfg)
        assert traj.times[0] == 0.0
        assert traj.times[1] == pytest.approx(1e-2, rel=1e-12)
        assert traj.times[-1] == 1e3
        assert np.all(np.diff(traj.times) > 0.0)
        assert traj.times.size == 2 + int(np.ceil(5 * 64))

    def test_max_step_limits_progress_per_step(self):
        cfg = FlowConfig(t_end=0.1, max_step=1e-3, first_sample=1e-3)
        case = make_linear_case(seed=3)
        traj = integrate(case.initial, case.problem, cfg)
        assert traj.n_steps_accepted >= 100

    def test_underflow_raises_stiffness_error_with_time(self):
        case = make_linear_case(seed=0, d=2, n_obs=10, op_scale=20.0)
        cfg = FlowConfig(t_end=1.0, min_step=1e-3, initial_step=1e-3,
                         rel_tol=1e-10, abs_tol=1e-12, first_sample=0.5)
        with pytest.raises(StiffnessError, match="min_step") as info:
            integrate(case.initial, case.problem, cfg)
        assert info.value.time == 0.0

    def test_workers_do_not_change_the_result(self):
        case = make_linear_case(seed=4, op_scale=10.0)
        cfg = FlowConfig(t_end=10.0, samples_per_decade=8)
        serial = integrate(case.initial, case.problem, cfg, workers=1)
        threaded = integrate(case.initial, case.problem, cfg, workers=4)
        assert np.array_equal(serial.states, threaded.states)
        assert serial.n_rhs_evals == threaded.n_rhs_evals


class TestForwardFailures:
    @staticmethod
    def flaky_problem(case):
        inner = case.problem.forward

        def flaky(u):
            if u[1] > 2.5:
                raise EvaluationError("outside the feasible region")
            return inner(u)

        return InverseProblem(
            forward=flaky, data=case.problem.data, noise=case.problem.noise,
            prior=case.problem.prior, dim_input=2, dim_output=10,
        )

    def test_regulariser_policy_logs_and_recovers(self):
        case = make_linear_case(seed=9)
        initial = case.initial.copy()
        initial[2] = [0.0, 3.0]  # starts in the failing region
        problem = self.flaky_problem(case)
        cfg = FlowConfig(t_end=5.0, first_sample=0.1, samples_per_decade=8)
        traj = integrate(initial, problem, cfg)
        assert traj.n_forward_failures > 0
        assert traj.failure_log[0] == (0.0, 2)
        assert traj.times[-1] == 5.0
        # the regulariser eventually pulls the particle back into range
        assert traj.states[-1][2, 1] < 2.5

    def test_raise_policy_propagates(self):
        case = make_linear_case(seed=9)
        initial = case.initial.copy()
        initial[2] = [0.0, 3.0]
        problem = self.flaky_problem(case)
        cfg = FlowConfig(t_end=5.0, first_sample=0.1, failure_policy="raise")
        with pytest.raises(EvaluationError, match="feasible"):
            integrate(initial, problem, cfg)

    def test_total_failure_degrades_to_regulariser_flow(self):
        def always_fails(u):
            raise EvaluationError("no evaluations today")

        problem = InverseProblem(
            forward=always_fails, data=np.zeros(4),
            noise=NoiseModel.identity(4),
            prior=PriorModel(np.eye(2), alpha=1.0),
            dim_input=2, dim_output=4,
        )
        rng = np.random.default_rng(30)
        initial = rng.standard_normal((3, 2))
        cfg = FlowConfig(t_end=1.0, first_sample=0.1, samples_per_decade=8)
        traj = integrate(initial, problem, cfg)
        assert traj.n_forward_failures == traj.n_rhs_evals
        assert np.all(np.isinf(traj.mean_residuals))
        assert traj.spreads[-1] < traj.spreads[0]


class TestTrajectoryCsv:
    @staticmethod
    def small_run() -> Trajectory:
        case = make_linear_case(seed=10)
        cfg = FlowConfig(t_end=1.0, first_sample=0.05, samples_per_decade=8)
        return integrate(case.initial, case.problem, cfg)

    def test_round_trip_is_exact(self, tmp_path):
        traj = self.small_run()
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        back = Trajectory.from_csv(path)
        assert np.array_equal(back.times, traj.times)
        assert np.array_equal(back.states, traj.states)
        assert np.array_equal(back.mean_residuals, traj.mean_residuals)
        assert np.array_equal(back.spreads, traj.spreads)
        assert np.array_equal(back.min_eigenvalues, traj.min_eigenvalues)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputOutputError, match="cannot read"):
            Trajectory.from_csv(tmp_path / "absent.csv")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ParseError, match="line 1"):
            Trajectory.from_csv(path)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "head.csv"
        path.write_text("a,b,c,d\n1,2,3,4\n")
        with pytest.raises(ParseError, match="line 1: header"):
            Trajectory.from_csv(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "bare.csv"
        path.write_text("t,mean_residual,spread,lambda_min,u_mean_0,p0_c0,p1_c0\n")
        with pytest.raises(ParseError, match="no samples"):
            Trajectory.from_csv(path)

    def test_field_count_names_line(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text(
            "t,mean_residual,spread,lambda_min,u_mean_0,p0_c0,p1_c0\n"
            "0,1,0.5,0.1,0,1,-1\n"
            "1,0.9,0.4\n"
        )
        with pytest.raises(ParseError, match="line 3: expected 7 fields"):
            Trajectory.from_csv(path)

    def test_bad_float_names_line(self, tmp_path):
        path = tmp_path / "badfloat.csv"
        path.write_text(
            "t,mean_residual,spread,lambda_min,u_mean_0,p0_c0,p1_c0\n"
            "0,oops,0.5,0.1,0,1,-1\n"
        )
        with pytest.raises(ParseError, match="line 2"):
            Trajectory.from_csv(path)
