import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from memkalman.kalman import (SingularInnovationError, StateSpaceModel, filter_step_ideal,
                              precompute_gains, simulate_process)
from memkalman.montecarlo import TrialConfig, estimate_error_covariance
from memkalman.scenarios import shift20

# steady state of the tracking model, frozen from the Riccati recursion
TRACKING_P_NN = np.array([[4.3747149, 0.09778179], [0.09778179, 0.00447343]])


def test_model_validation():
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.ones((1, 3)), np.eye(2), np.eye(1))
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.ones((1, 2)), [[1, 0.5], [0, 1]], np.eye(1))
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.ones((1, 2)), -np.eye(2), np.eye(1))
    with pytest.raises(ValueError):
        StateSpaceModel(np.ones((2, 3)), np.ones((1, 3)), np.eye(3), np.eye(1))


def test_integer_flag(tracking):
    assert tracking.model.is_integer
    m = StateSpaceModel([[0.5]], [[1.0]], [[1.0]], [[1.0]])
    assert not m.is_integer


def test_perfect_measurements_give_unit_gain():
    model = StateSpaceModel(np.eye(3), np.eye(3), np.eye(3) * 0.1, np.eye(3) * 1e-12)
    s = precompute_gains(model, np.eye(3), 5)
    assert np.allclose(s.K[-1], np.eye(3), atol=1e-9)


def test_tracking_converges_to_dare(tracking, tracking_schedule):
    m = tracking.model
    Pp = solve_discrete_are(m.F.T, m.H.T, m.Q, m.R)
    P = Pp - Pp @ m.H.T @ np.linalg.solve(m.H @ Pp @ m.H.T + m.R, m.H @ Pp)
    long = precompute_gains(m, tracking.P0, 1000)
    assert np.max(np.abs(long.P_post[-1] - long.P_post[-2])) < 1e-9
    assert np.allclose(long.P_post[-1], P, rtol=1e-9, atol=1e-12)
    # the 250 step horizon is within 1e-4 of steady state
    assert np.allclose(tracking_schedule.P_post[-1], P, rtol=1e-4)
    assert np.allclose(tracking_schedule.P_post[-1], TRACKING_P_NN, atol=1e-7)


def test_scalar_closed_form_without_process_noise():
    # 1/P_k = 1 + 4/P_{k-1}, so u_k = 1/P_k = 4**k u_0 + (4**k - 1)/3
    model = StateSpaceModel([[0.5]], [[1.0]], [[0.0]], [[1.0]])
    s = precompute_gains(model, [[1.0]], 10)
    k = np.arange(1, 11)
    expected = 1.0 / (4.0 ** k + (4.0 ** k - 1) / 3)
    assert np.allclose(s.P_post[:, 0, 0], expected, rtol=1e-12)


def test_scalar_riccati_root():
    # prior p solves p = 0.25 p / (p + 1) + 1, i.e. p**2 - 0.25 p - 1 = 0
    model = StateSpaceModel([[0.5]], [[1.0]], [[1.0]], [[1.0]])
    s = precompute_gains(model, [[1.0]], 100)
    prior = (0.25 + np.sqrt(0.0625 + 4)) / 2
    assert s.P_prior[-1, 0, 0] == pytest.approx(prior, rel=1e-12)
    assert s.P_post[-1, 0, 0] == pytest.approx(prior / (prior + 1), rel=1e-12)


def test_covariances_symmetric_psd(tracking_schedule):
    for P in (*tracking_schedule.P_prior, *tracking_schedule.P_post):
        assert np.array_equal(P, P.T)
        assert np.linalg.eigvalsh(P).min() >= -1e-10


def test_D_identity(tracking_schedule):
    m = tracking_schedule.model
    for K, D in zip(tracking_schedule.K, tracking_schedule.D):
        assert np.allclose(D, (np.eye(2) - K @ m.H) @ m.F, atol=1e-15)


def test_singular_innovation_reports_step():
    model = StateSpaceModel(np.eye(2), [[0.0, 0.0]], np.eye(2), [[0.0]])
    with pytest.raises(SingularInnovationError) as err:
        precompute_gains(model, np.eye(2), 3)
    assert err.value.step == 1


def test_quantized_copies(tracking_schedule):
    from memkalman.fixedpoint import FixedPointFormat
    fmt = FixedPointFormat(8, 6)
    q = tracking_schedule.quantized(fmt)
    assert len(q.K_q) == q.N == 250
    for K, Kq in zip(q.K, q.K_q):
        assert np.allclose(Kq.real - K, Kq.delta, atol=0)
        assert np.all(np.abs(Kq.delta) <= 2.0 ** -7)


def test_constant_trajectory():
    model = StateSpaceModel(np.eye(2), np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)))
    x, y = simulate_process(model, [1.5, -2.0], 10, np.random.default_rng(0))
    assert np.all(x == [1.5, -2.0])
    assert np.all(y == [1.5, -2.0])


def test_shift_model_is_cyclic():
    sc = shift20()
    model = StateSpaceModel(sc.model.F, sc.model.H, np.zeros((20, 20)), sc.model.R)
    x0 = np.arange(20.0)
    x, _ = simulate_process(model, x0, 25, np.random.default_rng(0))
    for k in range(25):
        assert np.array_equal(x[k], np.roll(x0, k + 1))


def test_process_noise_covariance():
    Q = np.array([[2.0, 0.6], [0.6, 1.0]])
    model = StateSpaceModel(np.eye(2), np.eye(2), Q, np.eye(2))
    x, _ = simulate_process(model, [0.0, 0.0], 100_000, np.random.default_rng(1))
    u = np.diff(np.vstack([[0.0, 0.0], x]), axis=0)
    assert np.allclose(np.cov(u.T), Q, rtol=0.05, atol=0.02)


def test_filter_step():
    rng = np.random.default_rng(3)
    F = rng.normal(size=(3, 3))
    H = rng.normal(size=(2, 3))
    K = rng.normal(size=(3, 2))
    D = (np.eye(3) - K @ H) @ F
    x, y = rng.normal(size=3), rng.normal(size=2)
    prior = F @ x
    assert np.allclose(filter_step_ideal(x, y, K, D), prior + K @ (y - H @ prior), atol=1e-12)
    assert np.allclose(filter_step_ideal(x, y, np.zeros((3, 2)), F), F @ x)


def test_ideal_filter_matches_riccati(tracking, tracking_schedule):
    cfg = TrialConfig(tracking.model, None, trials=10_000, base_seed=5, P0=tracking.P0)
    emp = estimate_error_covariance(cfg)
    assert emp.cov[0, 0] == pytest.approx(tracking_schedule.P_post[-1][0, 0], rel=0.03)
    diag = np.diag(tracking_schedule.P_post[-1])
    assert np.all(np.abs(np.diag(emp.cov) - diag) <= 5 * np.diag(emp.stderr))
