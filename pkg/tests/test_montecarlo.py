import math
from fractions import Fraction

import numpy as np
import pytest

from memkalman.fixedpoint import FixedPointFormat
from memkalman.kalman import StateSpaceModel, precompute_gains
from memkalman.memory import EnergyVector, MemoryNoiseParams, energy_for_probability
from memkalman.montecarlo import (SaturationWarning, TrialConfig, estimate_error_covariance,
                                  run_faulty_filter)
from memkalman.theory import theoretical_error_at

PARAMS = MemoryNoiseParams()


def uniform_p(fmt, p):
    return EnergyVector(np.full(fmt.bits, energy_for_probability(p, PARAMS.a)), fmt)


def round_half_away(x: Fraction) -> int:
    r = math.floor(abs(x) + Fraction(1, 2))
    return r if x >= 0 else -r


def test_config_validation(tracking):
    fmt = FixedPointFormat(8, 8)
    with pytest.raises(ValueError):
        TrialConfig(tracking.model, fmt, trials=0)
    with pytest.raises(ValueError):
        TrialConfig(tracking.model, None, ev=uniform_p(fmt, 0.01))
    with pytest.raises(ValueError):
        TrialConfig(tracking.model, fmt, overflow="wrap")
    with pytest.raises(ValueError):
        TrialConfig(tracking.model, fmt, tilt=-1)
    with pytest.raises(ValueError):
        TrialConfig(tracking.model, fmt, N=0)


@pytest.mark.filterwarnings("ignore::memkalman.montecarlo.SaturationWarning")
def test_deterministic_and_thread_invariant(tracking):
    fmt = FixedPointFormat(8, 8)
    cfg = TrialConfig(tracking.model, fmt, uniform_p(fmt, 1e-3), N=50, trials=900,
                      base_seed=11, P0=tracking.P0, block_size=100)
    a = estimate_error_covariance(cfg)
    b = estimate_error_covariance(cfg, threads=4)
    c = estimate_error_covariance(cfg)
    assert np.array_equal(a.cov, b.cov)
    assert np.array_equal(a.cov, c.cov)
    assert np.array_equal(a.stderr, b.stderr)


def test_seed_and_stream_change_result(tracking):
    fmt = FixedPointFormat(8, 8)
    base = dict(model=tracking.model, fmt=fmt, N=20, trials=200, P0=tracking.P0)
    a = estimate_error_covariance(TrialConfig(**base, base_seed=1))
    b = estimate_error_covariance(TrialConfig(**base, base_seed=2))
    c = estimate_error_covariance(TrialConfig(**base, base_seed=1, stream_key=(3,)))
    assert not np.array_equal(a.cov, b.cov)
    assert not np.array_equal(a.cov, c.cov)


def test_single_trial_is_outer_product(tracking):
    fmt = FixedPointFormat(8, 8)
    cfg = TrialConfig(tracking.model, fmt, N=30, trials=1, base_seed=4, P0=tracking.P0)
    emp = estimate_error_covariance(cfg)
    assert np.linalg.matrix_rank(emp.cov, tol=1e-12 * np.abs(emp.cov).max()) == 1
    assert np.allclose(emp.cov, np.outer(emp.mean, emp.mean))


def test_fine_format_tracks_ideal_filter(tracking):
    # both paths consume the same random draws, so only rounding separates them
    sched = precompute_gains(tracking.model, tracking.P0, 250)
    ideal = run_faulty_filter(sched, None, np.random.default_rng(8), batch=200)
    fine = run_faulty_filter(sched.quantized(FixedPointFormat(8, 24)), None,
                             np.random.default_rng(8), batch=200)
    assert np.max(np.abs(ideal.errors - fine.errors)) < 1e-4


def test_trajectory_matches_rational_reference():
    model = StateSpaceModel([[1.0]], [[1.0]], [[0.25]], [[4.0]])
    fmt = FixedPointFormat(6, 7)
    sched = precompute_gains(model, [[1.0]], 40, fmt)
    run = run_faulty_filter(sched, None, np.random.default_rng(21))

    rng = np.random.default_rng(21)
    x = float(rng.standard_normal((1, 1))[0, 0])
    scale, limit = 2 ** fmt.m, fmt.max_magnitude
    est = 0
    for k in range(40):
        x = x + float(rng.standard_normal((1, 1))[0, 0]) * 0.5
        y = x + float(rng.standard_normal((1, 1))[0, 0]) * 2.0
        y_int = max(-limit, min(limit, round_half_away(Fraction(y) * scale)))
        d = int(sched.D_q[k].signed()[0, 0])
        g = int(sched.K_q[k].signed()[0, 0])
        acc = 0
        for coef, val in ((d, est), (g, y_int)):
            if coef:
                acc += round_half_away(Fraction(coef * val, scale))
                acc = max(-limit, min(limit, acc))
        est = acc
    assert run.errors[0, 0] == est / scale - x


def test_stderr_shrinks_with_trials(tracking):
    fmt = FixedPointFormat(8, 10)
    kw = dict(model=tracking.model, fmt=fmt, N=60, base_seed=3, P0=tracking.P0)
    small = estimate_error_covariance(TrialConfig(**kw, trials=1000))
    big = estimate_error_covariance(TrialConfig(**kw, trials=4000))
    ratio = small.stderr[0, 0] / big.stderr[0, 0]
    assert ratio == pytest.approx(2.0, rel=0.2)


def test_reliable_memory_matches_theory(tracking):
    fmt = FixedPointFormat(8, 6)
    cfg = TrialConfig(tracking.model, fmt, trials=8000, base_seed=9, P0=tracking.P0)
    emp = estimate_error_covariance(cfg)
    theory = theoretical_error_at(tracking.model, fmt, None, 250, tracking.P0).P_star
    assert abs(emp.cov[0, 0] - theory[0, 0]) <= max(5 * emp.stderr[0, 0], 0.05 * theory[0, 0])
    assert emp.saturation_rate == 0.0
    assert emp.weight_mean == 1.0


def test_noisy_memory_matches_theory(tracking):
    fmt = FixedPointFormat(8, 8)
    ev = uniform_p(fmt, 2e-4)
    cfg = TrialConfig(tracking.model, fmt, ev, trials=6000, base_seed=12, P0=tracking.P0,
                      overflow="extend", tilt=0.5)
    emp = estimate_error_covariance(cfg, threads=2)
    theory = theoretical_error_at(tracking.model, fmt, ev, 250, tracking.P0).P_star
    assert abs(emp.cov[0, 0] / theory[0, 0] - 1) <= 0.1


def test_tilted_and_plain_agree(tracking):
    fmt = FixedPointFormat(8, 6)
    ev = uniform_p(fmt, 2e-3)
    kw = dict(model=tracking.model, fmt=fmt, ev=ev, N=100, trials=6000, P0=tracking.P0,
              overflow="extend")
    plain = estimate_error_covariance(TrialConfig(**kw, base_seed=1))
    tilted = estimate_error_covariance(TrialConfig(**kw, base_seed=2, tilt=0.5))
    se = math.hypot(plain.stderr[0, 0], tilted.stderr[0, 0])
    assert abs(plain.cov[0, 0] - tilted.cov[0, 0]) <= 4 * se
    assert tilted.weight_mean == pytest.approx(1.0, abs=0.05)


def test_saturation_warning(tracking):
    fmt = FixedPointFormat(2, 6)
    cfg = TrialConfig(tracking.model, fmt, N=100, trials=200, P0=np.diag([100.0, 1.0]))
    with pytest.warns(SaturationWarning):
        emp = estimate_error_covariance(cfg)
    assert emp.saturation_rate > 1e-3


def test_ideal_path_rejects_memory_noise(tracking):
    sched = precompute_gains(tracking.model, tracking.P0, 5)
    fmt = FixedPointFormat(8, 8)
    with pytest.raises(ValueError):
        run_faulty_filter(sched, uniform_p(fmt, 0.01), np.random.default_rng(0))
