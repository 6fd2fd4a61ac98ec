"""Analytic covariance of the total estimation error.

The stored estimate of the quantized filter on faulty memory evolves as

    x~_k = Q(D_k) x~_{k-1} + Q(K_k) Q(y_k) + eps_cross + gamma

and its error covariance ``P*_k`` follows a seven-term recursion (see
:func:`propagate_error_covariance`).  ``P*`` depends on the bank energies only
through the scalar memory noise variance ``s = sum_b 4**b p_b``, and it is
affine in ``s``; :func:`error_response` exploits that to evaluate any energy
allocation with two recursion runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .fixedpoint import FixedPointFormat, quantization_noise_variance
from .kalman import GainSchedule, StateSpaceModel, precompute_gains
from .memory import EnergyVector, MemoryNoiseParams, memory_noise_variance

Accounting = Literal["exact", "full"]


class ApproximationWarning(UserWarning):
    """F or H has non-integer entries, so the recursion is only approximate."""


@dataclass(frozen=True, eq=False)
class ErrorCovariance:
    P_star: np.ndarray
    k: int
    approximate: bool = False

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.P_star).copy()

    @property
    def trace(self) -> float:
        return float(np.trace(self.P_star))


@dataclass(frozen=True, eq=False)
class NoiseBudget:
    """Covariances of the four noise sources entering one step of the recursion.

    ``cov_eps_x`` (c x c) is rounding of the stored estimate, ``cov_eps_y``
    (d x d) rounding of the measurement, ``sigma_cross`` (c x c) the summed
    rounding of the scalar products and ``gamma`` (c x c) the memory noise.
    """

    cov_eps_x: np.ndarray
    cov_eps_y: np.ndarray
    sigma_cross: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("cov_eps_x", "cov_eps_y", "sigma_cross", "gamma"):
            mat = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if np.any(mat != np.diag(np.diag(mat))) or np.any(np.diag(mat) < 0):
                raise ValueError(f"{name} must be diagonal with nonnegative entries")
            object.__setattr__(self, name, mat)

    @classmethod
    def zero(cls, c: int, d: int) -> NoiseBudget:
        return cls(np.zeros((c, c)), np.zeros((d, d)), np.zeros((c, c)), np.zeros((c, c)))

    @classmethod
    def full(cls, c: int, d: int, fmt: FixedPointFormat | None,
              sigma2_gamma: float = 0.0) -> NoiseBudget:
        """Budget with one full rounding per stored value and per product.

        ``Cov[eps_x] = I_c s``, ``Cov[eps_y] = I_d s``, ``Sigma_x = I_c (c+d) s``
        with ``s = 2**(-2m)/12``.
        """
        s = 0.0 if fmt is None else quantization_noise_variance(fmt)
        return cls(np.eye(c) * s, np.eye(d) * s, np.eye(c) * (c + d) * s,
                   np.eye(c) * sigma2_gamma)

    @classmethod
    def from_arithmetic(cls, D_q, K_q, fmt: FixedPointFormat | None, c: int, d: int,
                        sigma2_gamma: float = 0.0) -> NoiseBudget:
        """Budget matching what :func:`~memkalman.fixedpoint.fp_matvec` actually does.

        The stored estimate is already on the grid, so ``Cov[eps_x] = 0``.
        Only products whose quantized coefficient is not an integer are
        rounded, so row ``i`` of ``Sigma_x`` counts those coefficients in
        ``[Q(D) | Q(K)]``.
        """
        if fmt is None:
            return cls(np.zeros((c, c)), np.zeros((d, d)), np.zeros((c, c)),
                       np.eye(c) * sigma2_gamma)
        s = quantization_noise_variance(fmt)
        counts = D_q.inexact_products() + K_q.inexact_products()
        return cls(np.zeros((c, c)), np.eye(d) * s, np.diag(counts * s),
                   np.eye(c) * sigma2_gamma)


def propagate_error_covariance(prev: ErrorCovariance, K, dK, D, dD,
                               model: StateSpaceModel, budget: NoiseBudget) -> ErrorCovariance:
    """Advance ``P*`` by one step.

    Returns the symmetrized sum

        (D+dD) P* (D+dD)^T + (K+dK) R (K+dK)^T + ((K+dK)H - I) Q ((K+dK)H - I)^T
        + D Cov[eps_x] D^T + K Cov[eps_y] K^T + Sigma_x + Gamma
    """
    c, d = model.c, model.d
    K, dK, D, dD = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (K, dK, D, dD))
    P = np.asarray(prev.P_star, dtype=float)
    shapes = {"P*": (P, (c, c)), "K": (K, (c, d)), "dK": (dK, (c, d)), "D": (D, (c, c)),
              "dD": (dD, (c, c)), "Cov[eps_x]": (budget.cov_eps_x, (c, c)),
              "Cov[eps_y]": (budget.cov_eps_y, (d, d)), "Sigma_x": (budget.sigma_cross, (c, c)),
              "Gamma": (budget.gamma, (c, c))}
    for name, (mat, shape) in shapes.items():
        if mat.shape != shape:
            raise ValueError(f"{name} has shape {mat.shape}, expected {shape}")
    Dt, Kt = D + dD, K + dK
    L = Kt @ model.H - np.eye(c)
    out = (Dt @ P @ Dt.T + Kt @ model.R @ Kt.T + L @ model.Q @ L.T
           + D @ budget.cov_eps_x @ D.T + K @ budget.cov_eps_y @ K.T
           + budget.sigma_cross + budget.gamma)
    return ErrorCovariance(0.5 * (out + out.T), prev.k + 1, prev.approximate)


def _budgets(schedule: GainSchedule, sigma2_gamma: float, accounting: Accounting):
    model, fmt = schedule.model, schedule.fmt
    c, d = model.c, model.d
    if accounting == "full":
        b = NoiseBudget.full(c, d, fmt, sigma2_gamma)
        return [b] * schedule.N
    if accounting != "exact":
        raise ValueError(f"unknown accounting {accounting!r}")
    if fmt is None:
        return [NoiseBudget.from_arithmetic(None, None, None, c, d, sigma2_gamma)] * schedule.N
    return [NoiseBudget.from_arithmetic(Dq, Kq, fmt, c, d, sigma2_gamma)
            for Dq, Kq in zip(schedule.D_q, schedule.K_q)]


def _check_integer(model: StateSpaceModel) -> bool:
    if model.is_integer:
        return False
    warnings.warn("F or H has non-integer entries; the error recursion is approximate",
                  ApproximationWarning, stacklevel=3)
    return True


def run_error_recursion(schedule: GainSchedule, sigma2_gamma: float = 0.0,
                        accounting: Accounting = "exact",
                        P_start=None) -> list[ErrorCovariance]:
    """All of ``P*_0 .. P*_N`` for a precomputed (optionally quantized) schedule.

    ``P*_0`` defaults to ``P0 + Gamma``: the initial estimate is itself read
    from faulty memory.
    """
    model = schedule.model
    approximate = _check_integer(model)
    c = model.c
    if P_start is None:
        P_start = schedule.P0 + np.eye(c) * sigma2_gamma
    cur = ErrorCovariance(np.asarray(P_start, dtype=float), 0, approximate)
    out = [cur]
    zeros_K = np.zeros((c, model.d))
    zeros_D = np.zeros((c, c))
    for k, budget in enumerate(_budgets(schedule, sigma2_gamma, accounting)):
        if schedule.fmt is None:
            dK, dD = zeros_K, zeros_D
        else:
            dK, dD = schedule.K_q[k].delta, schedule.D_q[k].delta
        cur = propagate_error_covariance(cur, schedule.K[k], dK, schedule.D[k], dD, model, budget)
        out.append(cur)
    return out


def theoretical_error_at(model: StateSpaceModel, fmt: FixedPointFormat | None,
                         ev: EnergyVector | None, N: int, P0, params: MemoryNoiseParams = None,
                         accounting: Accounting = "exact") -> ErrorCovariance:
    """Predicted ``P*_N`` for a given format and energy allocation.

    ``fmt=None`` disables quantization and ``ev=None`` disables memory noise.
    """
    params = params or MemoryNoiseParams()
    s = 0.0 if ev is None else memory_noise_variance(ev, params)
    schedule = precompute_gains(model, P0, N, fmt)
    return run_error_recursion(schedule, s, accounting)[-1]


@dataclass(frozen=True, eq=False)
class AffineResponse:
    """``P*_N(s) = A + s G`` as a function of the memory noise variance ``s``."""

    A: np.ndarray
    G: np.ndarray
    approximate: bool = False

    def at(self, sigma2_gamma: float) -> np.ndarray:
        return self.A + sigma2_gamma * self.G


def error_response(schedule: GainSchedule, accounting: Accounting = "exact") -> AffineResponse:
    """Split ``P*_N`` into its noise-free part and its memory-noise sensitivity.

    ``G`` follows ``G_k = (D+dD) G_{k-1} (D+dD)^T + I`` from ``G_0 = I``,
    which is the recursion driven by the ``Gamma`` terms alone.
    """
    A = run_error_recursion(schedule, 0.0, accounting)[-1]
    c = schedule.model.c
    G = np.eye(c)
    for k in range(schedule.N):
        Dt = schedule.D[k] + (schedule.D_q[k].delta if schedule.fmt is not None else 0.0)
        G = Dt @ G @ Dt.T + np.eye(c)
        G = 0.5 * (G + G.T)
    return AffineResponse(A.P_star, G, A.approximate)
