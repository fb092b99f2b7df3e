"""Cosserat rod construction, stepping, statics, and failure modes."""

import math

import numpy as np
import pytest

from ekirod.errors import ConfigurationError, EvaluationError, SolverError
from ekirod.rod import (
    RodConfig,
    RodState,
    build_rod,
    elastic_energy,
    kinetic_energy,
    solve_rod,
    step,
)


def make_config(**overrides) -> RodConfig:
    # L/n = 0.0625 is a dyadic rational, so the straight rest state below is
    # representable exactly and stays an exact fixed point of the dynamics.
    base = dict(
        rest_length=0.5,
        radius=0.01,
        n_elements=8,
        density=1200.0,
        youngs_modulus=5e6,
    )
    base.update(overrides)
    return RodConfig(**base)


class TestRodConfig:
    def test_rejects_too_few_elements(self):
        with pytest.raises(ConfigurationError, match="at least 4"):
            make_config(n_elements=3)

    def test_rejects_stubby_rod(self):
        with pytest.raises(ConfigurationError, match="slenderness"):
            make_config(rest_length=0.1)

    @pytest.mark.parametrize("nu", [0.5, -0.1])
    def test_rejects_poisson_outside_range(self, nu):
        with pytest.raises(ConfigurationError, match="poisson"):
            make_config(poisson_ratio=nu)

    def test_rejects_negative_damping(self):
        with pytest.raises(ConfigurationError, match="damping"):
            make_config(damping=-1.0)

    def test_rejects_nonpositive_length(self):
        with pytest.raises(ConfigurationError, match="rest_length"):
            make_config(rest_length=0.0)

    def test_rejects_step_above_stability_bound(self):
        bound = make_config().cfl_bound
        with pytest.raises(ConfigurationError, match="stability bound"):
            make_config(dt=1.01 * bound)
        make_config(dt=bound)  # the bound itself is allowed

    def test_rejects_parallel_frame_vectors(self):
        with pytest.raises(ConfigurationError, match="parallel"):
            make_config(axis=(1.0, 0.0, 0.0), normal=(-2.0, 0.0, 0.0))

    def test_rejects_zero_axis(self):
        with pytest.raises(ConfigurationError, match="nonzero"):
            make_config(axis=(0.0, 0.0, 0.0))

    def test_step_bound_formula(self):
        cfg = make_config()
        expect = 0.3 * (0.5 / 8) * math.sqrt(1200.0 / 5e6)
        assert cfg.cfl_bound == pytest.approx(expect, rel=1e-14)

    def test_automatic_step_capped_by_rotational_bound(self):
        cfg = make_config()
        rot = 0.3 * cfg.radius * math.sqrt(
            cfg.density / (cfg.shear_correction * cfg.shear_modulus)
        )
        assert cfg.stable_dt() == pytest.approx(min(cfg.cfl_bound, rot), rel=1e-14)
        assert cfg.stable_dt() < cfg.cfl_bound  # rotational modes bind here


class TestBuildRod:
    def test_rest_geometry(self):
        cfg = make_config()
        state, stiffness = build_rod(cfg)
        diffs = np.diff(state.positions, axis=0)
        assert np.allclose(np.linalg.norm(diffs, axis=1), 0.0625, rtol=1e-14)
        # Straight along +x from the base position.
        assert np.array_equal(state.positions[:, 1:], np.zeros((9, 2)))
        assert state.time == 0.0
        assert state.n_elements == 8
        assert stiffness.rest_element_length == pytest.approx(0.0625)

    def test_directors_orthonormal_right_handed(self):
        state, _ = build_rod(make_config(axis=(1.0, 2.0, -1.0),
                                         normal=(0.0, 1.0, 1.0)))
        for q in state.directors:
            assert np.allclose(q @ q.T, np.eye(3), atol=1e-14)
            assert np.allclose(np.cross(q[2], q[0]), q[1], atol=1e-14)

    def test_node_masses(self):
        cfg = make_config()
        _, stiffness = build_rod(cfg)
        area = math.pi * cfg.radius ** 2
        total = cfg.density * area * cfg.rest_length
        assert stiffness.node_mass.sum() == pytest.approx(total, rel=1e-12)
        assert stiffness.node_mass[0] == pytest.approx(stiffness.node_mass[1] / 2)
        assert stiffness.node_mass[-1] == pytest.approx(stiffness.node_mass[1] / 2)

    def test_rest_state_has_no_energy(self):
        state, stiffness = build_rod(make_config())
        assert kinetic_energy(state, stiffness) == 0.0
        assert elastic_energy(state, stiffness) == pytest.approx(0.0, abs=1e-20)


class TestStep:
    def test_unloaded_rest_state_is_a_fixed_point(self):
        cfg = make_config()
        state0, stiffness = build_rod(cfg)
        state = state0
        for _ in range(100):
            state = step(state, stiffness, cfg)
        assert np.array_equal(state.positions, state0.positions)
        assert np.array_equal(state.velocities, state0.velocities)
        assert np.array_equal(state.directors, state0.directors)

    def test_base_stays_clamped_under_load(self):
        cfg = make_config(gravity=(0.0, -9.81, 0.0))
        state0, stiffness = build_rod(cfg)
        state = state0
        for _ in range(500):
            state = step(state, stiffness, cfg)
        assert np.array_equal(state.positions[0], state0.positions[0])
        assert np.array_equal(state.directors[0], state0.directors[0])
        assert np.array_equal(state.velocities[0], np.zeros(3))
        # and the load actually moved the rest of the rod
        assert np.abs(state.positions[1:, 1]).max() > 0.0

    def test_does_not_mutate_input_state(self):
        cfg = make_config(gravity=(0.0, -9.81, 0.0))
        state0, stiffness = build_rod(cfg)
        before = state0.positions.copy()
        step(state0, stiffness, cfg)
        assert np.array_equal(state0.positions, before)
        assert np.array_equal(state0.velocities, np.zeros((9, 3)))

    def test_advances_time(self):
        cfg = make_config()
        state, stiffness = build_rod(cfg)
        new = step(state, stiffness, cfg, dt=1e-5)
        assert new.time == pytest.approx(1e-5)

    def test_rejects_nonpositive_dt(self):
        cfg = make_config()
        state, stiffness = build_rod(cfg)
        with pytest.raises(ConfigurationError, match="positive"):
            step(state, stiffness, cfg, dt=0.0)

    def test_absurd_step_raises_instead_of_returning_nan(self):
        cfg = make_config(gravity=(0.0, -9.81, 0.0))
        state, stiffness = build_rod(cfg)
        with pytest.raises(SolverError, match="non-finite"):
            for _ in range(10):
                state = step(state, stiffness, cfg, dt=1e80)

    def test_damped_energy_decays_monotonically(self):
        cfg = make_config(damping=20.0)
        state, stiffness = build_rod(cfg)
        # Smooth transverse velocity profile: low modes only, so the Verlet
        # energy wobble stays far below what the damping removes per window.
        s_param = np.linspace(0.0, 1.0, 9)
        v0 = np.zeros((9, 3))
        v0[:, 1] = 0.1 * np.sin(0.5 * np.pi * s_param)
        v0[0] = 0.0
        state = RodState(state.positions, v0, state.directors,
                         state.angular_velocities, 0.0)
        dt = cfg.stable_dt()
        energies = [kinetic_energy(state, stiffness) + elastic_energy(state, stiffness)]
        for k in range(4000):
            state = step(state, stiffness, cfg, dt=dt)
            if (k + 1) % 200 == 0:
                energies.append(
                    kinetic_energy(state, stiffness) + elastic_energy(state, stiffness)
                )
        assert energies[0] > 0.0
        assert energies[-1] < 0.1 * energies[0]
        for before, after in zip(energies, energies[1:]):
            assert after <= before * (1.0 + 1e-10)


BEAM = RodConfig(
    rest_length=0.5, radius=0.01, n_elements=16, density=1200.0,
    youngs_modulus=5e6, tip_force=(0.0, -0.014137, 0.0),
    damping=7.0, t_end=3.0,
)


class TestSolveRod:
    def test_deflection_halves_when_stiffness_doubles(self):
        soft = solve_rod(np.array([1200.0, 5e6]), BEAM)
        stiff = solve_rod(np.array([1200.0, 1e7]), BEAM)
        d_soft = -soft.positions[-1, 1]
        d_stiff = -stiff.positions[-1, 1]
        assert d_soft > 0.0
        assert d_soft / d_stiff == pytest.approx(2.0, rel=0.1)

    def test_arclength_nearly_preserved(self):
        settled = solve_rod(np.array([1200.0, 5e6]), BEAM)
        arclength = np.linalg.norm(np.diff(settled.positions, axis=0), axis=1).sum()
        assert abs(arclength - 0.5) < 0.005

    def test_deterministic(self):
        a = solve_rod(np.array([1200.0, 5e6]), BEAM)
        b = solve_rod(np.array([1200.0, 5e6]), BEAM)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.directors, b.directors)

    def test_parameters_override_config_material(self):
        other_material = RodConfig(
            rest_length=0.5, radius=0.01, n_elements=16, density=900.0,
            youngs_modulus=1e7, tip_force=(0.0, -0.014137, 0.0),
            damping=7.0, t_end=3.0,
        )
        a = solve_rod(np.array([1200.0, 5e6]), BEAM)
        b = solve_rod(np.array([1200.0, 5e6]), other_material)
        assert np.array_equal(a.positions, b.positions)

    def test_rejects_wrong_parameter_count(self):
        with pytest.raises(EvaluationError, match="2 parameters"):
            solve_rod(np.array([1.0, 2.0, 3.0]), BEAM)

    @pytest.mark.parametrize("params", [(0.0, 5e6), (1200.0, -1.0),
                                        (np.nan, 5e6)])
    def test_rejects_nonpositive_parameters(self, params):
        with pytest.raises(EvaluationError, match="positive"):
            solve_rod(np.array(params), BEAM)

    def test_reports_parameters_that_break_constraints(self):
        # dt sits exactly at the bound for the config material; quadrupling
        # E halves the bound, so the override invalidates the step size.
        bound = make_config(youngs_modulus=2e6).cfl_bound
        cfg = make_config(youngs_modulus=2e6, dt=bound, damping=5.0)
        with pytest.raises(EvaluationError, match="constraints"):
            solve_rod(np.array([1200.0, 8e6]), cfg)

    def test_undamped_run_does_not_settle(self):
        cfg = make_config(gravity=(0.0, -9.81, 0.0), damping=0.0, t_end=0.3)
        with pytest.raises(EvaluationError, match="settle"):
            solve_rod(np.array([1200.0, 5e6]), cfg)

    def test_runaway_load_raises_solver_error(self):
        cfg = make_config(tip_force=(0.0, 1e308, 0.0), damping=5.0, t_end=1.0)
        with pytest.raises(SolverError, match="diverged"):
            solve_rod(np.array([1200.0, 5e6]), cfg)


class TestEnergies:
    def test_uniform_stretch_hand_value(self):
        cfg = make_config()
        state, stiffness = build_rod(cfg)
        stretched = RodState(
            state.positions * 1.01, state.velocities, state.directors,
            state.angular_velocities, 0.0,
        )
        area = math.pi * cfg.radius ** 2
        expect = 0.5 * cfg.youngs_modulus * area * 0.01 ** 2 * cfg.rest_length
        assert elastic_energy(stretched, stiffness) == pytest.approx(expect, rel=1e-10)

    def test_uniform_velocity_hand_value(self):
        cfg = make_config()
        state, stiffness = build_rod(cfg)
        v = np.full((9, 3), 0.0)
        v[:, 0] = 0.3
        moving = RodState(state.positions, v, state.directors,
                          state.angular_velocities, 0.0)
        area = math.pi * cfg.radius ** 2
        expect = 0.5 * (cfg.density * area * cfg.rest_length) * 0.3 ** 2
        assert kinetic_energy(moving, stiffness) == pytest.approx(expect, rel=1e-12)


class TestRodStateValidation:
    def test_rejects_wrong_position_shape(self):
        with pytest.raises(ValueError, match="positions"):
            RodState(np.zeros((9, 2)), np.zeros((9, 3)),
                     np.tile(np.eye(3), (8, 1, 1)), np.zeros((8, 3)), 0.0)

    def test_rejects_non_finite_entries(self):
        positions = np.zeros((9, 3))
        positions[4, 1] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            RodState(positions, np.zeros((9, 3)),
                     np.tile(np.eye(3), (8, 1, 1)), np.zeros((8, 3)), 0.0)
