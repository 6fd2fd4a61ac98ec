import warnings

import numpy as np
import pytest

from memkalman.fixedpoint import FixedPointFormat, quantization_noise_variance
from memkalman.kalman import StateSpaceModel, precompute_gains
from memkalman.memory import EnergyVector, MemoryNoiseParams, memory_noise_variance
from memkalman.theory import (ApproximationWarning, ErrorCovariance, NoiseBudget,
                              error_response, propagate_error_covariance, run_error_recursion,
                              theoretical_error_at)

PARAMS = MemoryNoiseParams()


def test_noiseless_recovers_riccati(tracking, tracking_schedule):
    P = theoretical_error_at(tracking.model, None, None, 250, tracking.P0).P_star
    assert np.max(np.abs(P - tracking_schedule.P_post[-1])) <= 1e-9


def test_fixed_point_of_noiseless_recursion(tracking):
    s = precompute_gains(tracking.model, tracking.P0, 1000)
    zero = NoiseBudget.zero(2, 1)
    P = ErrorCovariance(s.P_post[-1], 0)
    nxt = propagate_error_covariance(P, s.K[-1], np.zeros((2, 1)), s.D[-1], np.zeros((2, 2)),
                                     tracking.model, zero)
    assert np.max(np.abs(nxt.P_star - s.P_post[-1])) <= 1e-9


def test_memory_noise_adds_at_least_gamma(tracking, tracking_schedule):
    s2 = 0.05
    P = run_error_recursion(tracking_schedule, s2)[-1].P_star
    assert np.all(np.diag(P) - np.diag(tracking_schedule.P_post[-1]) >= s2)


def test_single_step_by_hand(tracking):
    fmt = FixedPointFormat(8, 6)
    model = tracking.model
    s = precompute_gains(model, tracking.P0, 1, fmt)
    s2 = 0.01
    eps = quantization_noise_variance(fmt)
    P0 = tracking.P0 + s2 * np.eye(2)
    K, D = s.K[0], s.D[0]
    Kt, Dt = s.K_q[0].real, s.D_q[0].real
    L = Kt @ model.H - np.eye(2)
    expected = (Dt @ P0 @ Dt.T + Kt @ model.R @ Kt.T + L @ model.Q @ L.T
                + D @ (np.eye(2) * eps) @ D.T + K @ (np.eye(1) * eps) @ K.T
                + np.eye(2) * 3 * eps + np.eye(2) * s2)
    got = run_error_recursion(s, s2, accounting="full")[-1]
    assert got.k == 1
    assert np.allclose(got.P_star, expected, rtol=1e-14, atol=1e-18)


def test_exact_budget_counts_rounded_products(tracking):
    fmt = FixedPointFormat(8, 4)
    s = precompute_gains(tracking.model, tracking.P0, 250, fmt)
    b = NoiseBudget.from_arithmetic(s.D_q[-1], s.K_q[-1], fmt, 2, 1)
    eps = quantization_noise_variance(fmt)
    assert np.all(b.cov_eps_x == 0)
    assert b.cov_eps_y[0, 0] == eps
    counts = s.D_q[-1].inexact_products() + s.K_q[-1].inexact_products()
    assert np.allclose(np.diag(b.sigma_cross), counts * eps)


def test_full_budget():
    fmt = FixedPointFormat(3, 5)
    b = NoiseBudget.full(2, 1, fmt, 0.3)
    eps = 2.0 ** -10 / 12
    assert np.allclose(b.sigma_cross, np.eye(2) * 3 * eps)
    assert np.allclose(b.gamma, np.eye(2) * 0.3)


def test_budget_must_be_diagonal():
    with pytest.raises(ValueError):
        NoiseBudget(np.ones((2, 2)), np.eye(1), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        NoiseBudget(np.eye(2), np.eye(1), -np.eye(2), np.eye(2))


def test_dimension_mismatch(tracking):
    with pytest.raises(ValueError):
        propagate_error_covariance(ErrorCovariance(np.eye(3), 0), np.zeros((2, 1)),
                                   np.zeros((2, 1)), np.eye(2), np.zeros((2, 2)),
                                   tracking.model, NoiseBudget.zero(2, 1))


def test_floor_is_flat_from_ten_bits(tracking):
    floors = {m: theoretical_error_at(tracking.model, FixedPointFormat(8, m), None, 250,
                                      tracking.P0).P_star[0, 0] for m in range(9, 21)}
    for m in range(10, 21):
        assert abs(floors[m] / floors[20] - 1) <= 0.02
    # nonincreasing once the gains are resolved
    vals = [floors[m] for m in range(9, 21)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_energy_sweep_monotone(tracking):
    fmt = FixedPointFormat(8, 16)
    s = precompute_gains(tracking.model, tracking.P0, 250, fmt)
    prev = np.inf
    for e_tot in np.linspace(2, 40, 30):
        s2 = memory_noise_variance(EnergyVector.uniform(fmt, e_tot), PARAMS)
        P = run_error_recursion(s, s2)[-1].P_star[0, 0]
        assert P <= prev
        prev = P


def test_monotone_in_each_bank(tracking):
    fmt = FixedPointFormat(8, 6)
    s = precompute_gains(tracking.model, tracking.P0, 250, fmt)
    base = np.full(fmt.bits, 0.8)
    P0 = run_error_recursion(s, memory_noise_variance(EnergyVector(base, fmt), PARAMS))[-1]
    for b in range(fmt.bits):
        e = base.copy()
        e[b] += 0.3
        P1 = run_error_recursion(s, memory_noise_variance(EnergyVector(e, fmt), PARAMS))[-1]
        assert np.all(np.diag(P1.P_star) <= np.diag(P0.P_star))


def test_symmetric_psd_every_step(tracking):
    fmt = FixedPointFormat(8, 10)
    s = precompute_gains(tracking.model, tracking.P0, 250, fmt)
    for P in run_error_recursion(s, 0.1):
        assert np.array_equal(P.P_star, P.P_star.T)
        assert np.linalg.eigvalsh(P.P_star).min() >= -1e-10


def test_dominates_ideal_error(tracking, tracking_schedule):
    fmt = FixedPointFormat(8, 12)
    s = tracking_schedule.quantized(fmt)
    Ps = run_error_recursion(s, 1e-4)
    for k in range(1, 251):
        assert np.all(np.diag(Ps[k].P_star) >= np.diag(s.P_post[k - 1]))


def test_affine_response(tracking):
    fmt = FixedPointFormat(8, 9)
    s = precompute_gains(tracking.model, tracking.P0, 250, fmt)
    r = error_response(s)
    for s2 in (0.0, 1e-4, 0.3):
        assert np.allclose(r.at(s2), run_error_recursion(s, s2)[-1].P_star, rtol=1e-10)


def test_non_integer_model_is_flagged():
    model = StateSpaceModel([[0.9]], [[1.0]], [[0.1]], [[1.0]])
    with pytest.warns(ApproximationWarning):
        P = theoretical_error_at(model, FixedPointFormat(2, 8), None, 20, [[1.0]])
    assert P.approximate


def test_integer_model_not_flagged(tracking):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        P = theoretical_error_at(tracking.model, FixedPointFormat(8, 8), None, 20, tracking.P0)
    assert not P.approximate
