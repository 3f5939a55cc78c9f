"""Tests for the ensemble harness, exit-time estimation and mean-state checks."""

import numpy as np
import pytest

from spinstab.controller import new_controller
from spinstab.dynamics import SdeStepConfig, integrate_ensemble, simulate_trajectory
from spinstab.montecarlo import (
    compare_mean_vs_ode,
    estimate_exit_time,
    mean_state_at,
    run_ensemble,
)
from spinstab.quantum import (
    QuantumState,
    eigenstate,
    lyapunov_Q,
    make_spin_operators,
    maximally_mixed,
)

OPS3 = make_spin_operators(1)
CFG = SdeStepConfig(dt=1e-3, eta=1.0)
RHO1 = eigenstate(OPS3, 1)


class TestRunEnsemble:
    def test_single_member_reduces_to_trajectory(self):
        ctrl = new_controller(0.1, 3, OPS3, RHO1)
        stats = run_ensemble(RHO1, ctrl, 2.0, CFG, M=1, base_seed=9,
                             record_stride=10)
        rec = simulate_trajectory(RHO1, ctrl, 2.0, CFG, seed=9, stream=0,
                                  record_stride=10)
        np.testing.assert_array_equal(stats.times, rec.times)
        np.testing.assert_array_equal(stats.mean_V, rec.V)
        assert stats.final_V[0] == rec.V[-1]

    def test_reproducible_and_worker_independent(self):
        ctrl = new_controller(0.1, 3, OPS3, RHO1)
        kw = dict(M=130, base_seed=3, record_stride=100)
        a = run_ensemble(RHO1, ctrl, 0.5, CFG, **kw, workers=1)
        b = run_ensemble(RHO1, ctrl, 0.5, CFG, **kw, workers=1)
        c = run_ensemble(RHO1, ctrl, 0.5, CFG, **kw, workers=2)
        for other in (b, c):
            np.testing.assert_array_equal(a.mean_V, other.mean_V)
            np.testing.assert_array_equal(a.mean_state, other.mean_state)
            np.testing.assert_array_equal(a.final_V, other.final_V)

    def test_fixed_input_mean_v_approaches_mixed_level(self):
        # the ensemble-average oracle: V of the averaged flow tends to 1 - 1/N
        stats = run_ensemble(RHO1, 1.0, 10.0, CFG, M=400, base_seed=11,
                             f=3, ops=OPS3, record_stride=200)
        assert stats.mean_V[-1] == pytest.approx(1 - 1 / 3, abs=0.05)

    def test_mean_state_valid_at_every_time(self):
        stats = run_ensemble(RHO1, 1.0, 1.0, CFG, M=64, base_seed=2,
                             f=3, ops=OPS3, record_stride=100)
        for i in range(len(stats.times)):
            st = mean_state_at(stats, i)
            assert isinstance(st, QuantumState)
        assert np.all(stats.mean_V >= 0) and np.all(stats.mean_V <= 1)
        assert np.all((stats.conv_frac >= 0) & (stats.conv_frac <= 1))

    def test_q_of_mean_state_nonincreasing_under_fixed_input(self):
        stats = run_ensemble(RHO1, 1.0, 4.0, CFG, M=300, base_seed=5,
                             f=3, ops=OPS3, record_stride=200)
        q = np.array([lyapunov_Q(stats.mean_state[i])
                      for i in range(len(stats.times))])
        assert np.all(np.diff(q) <= 0.02)  # statistical slack

    def test_requires_target_for_fixed_input(self):
        with pytest.raises(ValueError, match="fixed-input"):
            run_ensemble(RHO1, 1.0, 1.0, CFG, M=2, base_seed=0)

    def test_rejects_empty_ensemble(self):
        with pytest.raises(ValueError, match="M"):
            run_ensemble(RHO1, 1.0, 1.0, CFG, M=0, base_seed=0, f=3, ops=OPS3)


class TestExitTime:
    def test_precondition_violated(self):
        # V(rho_(3)) = 0 <= 1 - gamma_a
        with pytest.raises(ValueError, match="V >"):
            estimate_exit_time(0.1, eigenstate(OPS3, 3), 3, OPS3, 10.0, CFG,
                               M=4, base_seed=0)

    def test_gamma_a_range_checked(self):
        for bad in (0.0, 1.0, 1.5, -0.1):
            with pytest.raises(ValueError, match="gamma_a"):
                estimate_exit_time(bad, RHO1, 3, OPS3, 10.0, CFG, M=4,
                                   base_seed=0)

    def test_finite_exit_with_no_censoring_at_generous_cap(self):
        rep = estimate_exit_time(0.1, RHO1, 3, OPS3, 40.0, CFG, M=64,
                                 base_seed=21)
        assert rep.censored == 0
        assert not rep.inconclusive
        assert rep.mean is not None and rep.mean > 0
        assert rep.tau.size == 64
        assert np.all(rep.tau >= 0)
        assert rep.dynkin_bound is not None

    def test_all_censored_is_inconclusive(self):
        # a cap shorter than any plausible exit
        rep = estimate_exit_time(0.35, RHO1, 3, OPS3, 2 * CFG.dt, CFG, M=8,
                                 base_seed=1)
        assert rep.inconclusive
        assert rep.mean is None
        assert rep.censored == 8

    def test_coupled_monotonicity_in_gamma_a(self):
        """With shared noise, a deeper exit level (larger gamma_a) is reached
        no earlier, path by path."""
        shallow = estimate_exit_time(0.05, RHO1, 3, OPS3, 40.0, CFG, M=48,
                                     base_seed=13)
        deep = estimate_exit_time(0.2, RHO1, 3, OPS3, 40.0, CFG, M=48,
                                  base_seed=13)
        assert shallow.censored == 0 and deep.censored == 0
        assert np.all(shallow.tau <= deep.tau + 1e-12)
        assert shallow.mean <= deep.mean + 1e-12

    def test_dynkin_diagnostic_consistent(self):
        rep = estimate_exit_time(0.1, RHO1, 3, OPS3, 40.0, CFG, M=128,
                                 base_seed=17)
        slack = 2 * rep.stderr
        assert rep.mean <= rep.dynkin_bound + slack

    def test_censored_paths_counted_in_diagnostic(self):
        rep = estimate_exit_time(0.1, RHO1, 3, OPS3, 1.0, CFG, M=64,
                                 base_seed=21, t0=0.8)
        if rep.censored:
            assert rep.dynkin_p_hat >= rep.censored / rep.M


class TestMeanVsOde:
    def test_mixed_initial_state_stays_at_equilibrium_on_average(self):
        # the averaged flow is exactly constant at I/N; individual paths
        # still diffuse, so the Monte Carlo gap is pure O(M^-1/2) noise
        dev = compare_mean_vs_ode(maximally_mixed(3), 1.0, 1.0, CFG, M=256,
                                  dt_ode=1e-3, base_seed=4, f=3, ops=OPS3,
                                  record_stride=100)
        assert dev < 0.06

    def test_zero_input_diagonal_initial_state(self):
        # diagonal rho0: the averaged flow is frozen; the Monte Carlo mean
        # agrees within statistical tolerance
        rho0 = QuantumState(np.diag([0.5, 0.3, 0.2]).astype(complex))
        assert np.abs(np.asarray(
            integrate_ensemble(rho0, 0.0, 1.0, 1e-3, OPS3).states[-1])
            - np.asarray(rho0)).max() < 1e-12
        dev = compare_mean_vs_ode(rho0, 0.0, 1.0, CFG, M=200, dt_ode=1e-3,
                                  base_seed=6, f=3, ops=OPS3,
                                  record_stride=100)
        assert dev < 0.1

    def test_moderate_ensemble_tracks_ode(self):
        dev = compare_mean_vs_ode(RHO1, 1.0, 2.0, CFG, M=300, dt_ode=1e-3,
                                  base_seed=8, f=3, ops=OPS3,
                                  record_stride=100)
        assert dev < 0.1

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            compare_mean_vs_ode(RHO1, 1.0, 1.0, CFG, M=4, dt_ode=0.4,
                                base_seed=0, f=3, ops=OPS3, record_stride=100)
