"""Full-precision Kalman filter machinery.

The filter is run in the form ``x_k = D_k x_{k-1} + K_k y_k`` with
``D_k = (I - K_k H) F``.  Gains and covariances do not depend on the data,
so they are computed once, offline, and shared by every Monte Carlo trial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedPointFormat, QuantizedMatrix, quantize_matrix


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance ``H P H^T + R`` could not be inverted."""

    def __init__(self, step: int):
        super().__init__(f"innovation covariance is singular at step {step}")
        self.step = step


def _as_matrix(name, value, shape=None):
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    if mat.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {mat.shape}")
    if shape is not None and mat.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} has non-finite entries")
    return mat


def _check_psd(name, mat, tol=1e-10):
    if not np.allclose(mat, mat.T, rtol=0, atol=tol * max(1.0, np.abs(mat).max())):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(mat).min() < -tol * max(1.0, np.abs(mat).max()):
        raise ValueError(f"{name} must be positive semi-definite")


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``L L^T = cov`` that also works for singular ``cov``."""
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Linear Gaussian plant ``x_{k+1} = F x_k + u_k`` observed as ``y_k = H x_k + v_k``."""

    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        F = _as_matrix("F", self.F)
        c = F.shape[0]
        if F.shape != (c, c):
            raise ValueError(f"F must be square, got {F.shape}")
        H = _as_matrix("H", self.H)
        if H.shape[1] != c:
            raise ValueError(f"H must have {c} columns, got shape {H.shape}")
        d = H.shape[0]
        Q = _as_matrix("Q", self.Q, (c, c))
        R = _as_matrix("R", self.R, (d, d))
        _check_psd("Q", Q)
        _check_psd("R", R)
        for name, mat in zip("FHQR", (F, H, Q, R)):
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)

    @property
    def c(self) -> int:
        return self.F.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @property
    def is_integer(self) -> bool:
        """True when ``F`` and ``H`` only contain integers."""
        return bool(np.all(self.F == np.round(self.F)) and np.all(self.H == np.round(self.H)))


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Per-step filter matrices for steps ``k = 1..N``.

    Arrays are stacked along axis 0, so ``K[k-1]`` is the gain of step ``k``.
    When ``fmt`` is set, ``K_q``/``D_q`` hold the quantized copies and their
    exact residuals.
    """

    model: StateSpaceModel
    P0: np.ndarray
    K: np.ndarray
    D: np.ndarray
    P_prior: np.ndarray
    P_post: np.ndarray
    fmt: FixedPointFormat | None = None
    K_q: tuple[QuantizedMatrix, ...] = field(default=())
    D_q: tuple[QuantizedMatrix, ...] = field(default=())

    @property
    def N(self) -> int:
        return self.K.shape[0]

    def quantized(self, fmt: FixedPointFormat) -> GainSchedule:
        """Copy with ``K_k`` and ``D_k`` rounded to ``fmt``."""
        return GainSchedule(self.model, self.P0, self.K, self.D, self.P_prior, self.P_post,
                            fmt, tuple(quantize_matrix(k, fmt) for k in self.K),
                            tuple(quantize_matrix(d, fmt) for d in self.D))

    def truncated(self, N: int) -> GainSchedule:
        if not 1 <= N <= self.N:
            raise ValueError(f"N must be in [1, {self.N}], got {N}")
        return GainSchedule(self.model, self.P0, self.K[:N], self.D[:N], self.P_prior[:N],
                            self.P_post[:N], self.fmt, self.K_q[:N], self.D_q[:N])


def precompute_gains(model: StateSpaceModel, P0, N: int,
                     fmt: FixedPointFormat | None = None) -> GainSchedule:
    """Run the covariance recursion for ``N`` steps from ``P0``.

    Parameters
    ----------
    model : StateSpaceModel
    P0 : array_like
        Covariance of the initial estimation error.
    N : int
        Number of filter steps.
    fmt : FixedPointFormat, optional
        If given, quantized gain matrices are attached.

    Raises
    ------
    SingularInnovationError
        If the innovation covariance is singular at some step.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    c, d = model.c, model.d
    P = _as_matrix("P0", P0, (c, c))
    _check_psd("P0", P)
    F, H, Q, R = model.F, model.H, model.Q, model.R
    I = np.eye(c)
    Ks = np.empty((N, c, d))
    Ds = np.empty((N, c, c))
    priors = np.empty((N, c, c))
    posts = np.empty((N, c, c))
    for k in range(N):
        Pp = F @ P @ F.T + Q
        Pp = 0.5 * (Pp + Pp.T)
        S = H @ Pp @ H.T + R
        try:
            if np.linalg.cond(S) > 1e15:
                raise np.linalg.LinAlgError
            K = np.linalg.solve(S, H @ Pp).T
        except np.linalg.LinAlgError:
            raise SingularInnovationError(k + 1) from None
        P = (I - K @ H) @ Pp
        P = 0.5 * (P + P.T)
        Ks[k], Ds[k], priors[k], posts[k] = K, (I - K @ H) @ F, Pp, P
    schedule = GainSchedule(model, P0=np.array(P0, dtype=float).reshape(c, c), K=Ks, D=Ds,
                            P_prior=priors, P_post=posts)
    return schedule.quantized(fmt) if fmt is not None else schedule


def simulate_process(model: StateSpaceModel, x0, N: int, rng: np.random.Generator):
    """Draw one trajectory of the plant and its measurements.

    Returns
    -------
    states : ndarray, shape (N, c)
        ``x_1 .. x_N``.
    measurements : ndarray, shape (N, d)
        ``y_1 .. y_N``.
    """
    x = np.asarray(x0, dtype=float).reshape(model.c)
    Lq, Lr = psd_factor(model.Q), psd_factor(model.R)
    states = np.empty((N, model.c))
    meas = np.empty((N, model.d))
    for k in range(N):
        x = model.F @ x + Lq @ rng.standard_normal(model.c)
        states[k] = x
        meas[k] = model.H @ x + Lr @ rng.standard_normal(model.d)
    return states, meas


def filter_step_ideal(x_hat, y, K, D) -> np.ndarray:
    """One full-precision filter update ``D x_hat + K y``."""
    return np.asarray(D) @ np.asarray(x_hat, dtype=float) + np.asarray(K) @ np.asarray(y, dtype=float)
