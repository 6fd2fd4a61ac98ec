"""Fault-injection simulation of the quantized filter on faulty memory.

Each trial draws a ground-truth trajectory in full precision and runs the
filter in fixed point.  The estimate lives in faulty memory: every read goes
through :func:`~memkalman.memory.corrupt_array`, one read per step plus a final
read at step ``N``.  Gains, measurements and the sign bits are reliable.

Trials are grouped in blocks; block ``i`` draws from the substream
``SeedSequence(base_seed, spawn_key=(*stream_key, i))`` so results do not
depend on the number of worker threads.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedPointArray, FixedPointFormat, QuantizedMatrix, fp_matvec
from .kalman import GainSchedule, StateSpaceModel, precompute_gains, psd_factor
from .memory import (EnergyVector, MemoryNoiseParams, corrupt_array,
                     flip_log_likelihood_ratio, tilted_probabilities)

SATURATION_WARN_RATE = 1e-3


class SaturationWarning(UserWarning):
    """Too many stored values hit the format range; ``n`` is probably too small."""


@dataclass(frozen=True, eq=False)
class TrialConfig:
    """Everything that determines a Monte Carlo estimate.

    ``fmt=None`` runs the full-precision filter and ``ev=None`` (or infinite
    energies) makes the memory reliable.  ``tilt > 0`` switches on importance
    sampling of the bit flips, see :func:`~memkalman.memory.tilted_probabilities`.
    """

    model: StateSpaceModel
    fmt: FixedPointFormat | None
    ev: EnergyVector | None = None
    params: MemoryNoiseParams = field(default_factory=MemoryNoiseParams)
    N: int = 250
    trials: int = 100_000
    base_seed: int = 0
    P0: np.ndarray | None = None
    overflow: str = "saturate"
    tilt: float = 0.0
    block_size: int = 10_000
    scenario: str = "custom"
    stream_key: tuple[int, ...] = ()

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.ev is not None and self.fmt is None:
            raise ValueError("memory noise needs a fixed-point format")
        if self.overflow not in ("saturate", "extend"):
            raise ValueError(f"unknown overflow policy {self.overflow!r}")
        if self.tilt < 0:
            raise ValueError(f"tilt must be >= 0, got {self.tilt}")

    @property
    def initial_covariance(self) -> np.ndarray:
        return self.model.Q if self.P0 is None else np.asarray(self.P0, dtype=float)


@dataclass(frozen=True, eq=False)
class FilterRun:
    """Final errors of a batch of trials.

    ``log_weights`` are importance-sampling corrections (all zero without
    tilting); ``saturated`` counts stored values clipped to the format range.
    """

    errors: np.ndarray
    log_weights: np.ndarray
    saturated: int
    stored: int


@dataclass(frozen=True, eq=False)
class EmpiricalCovariance:
    """Weighted second moment ``mean(w e e^T)`` of the final error over trials.

    The error model is zero-mean, so the raw second moment is the covariance
    estimate; the sample mean is kept for checking that assumption.
    ``stderr`` is the per-entry standard error of ``cov`` and ``trace_stderr``
    that of its trace.  ``weight_mean`` is the average importance weight,
    which should be close to 1.
    """

    cov: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    trials: int
    saturation_rate: float
    trace_stderr: float = 0.0
    weight_mean: float = 1.0

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))


def _combined_gains(schedule: GainSchedule) -> list[QuantizedMatrix]:
    out = []
    for Dq, Kq in zip(schedule.D_q, schedule.K_q):
        vals = FixedPointArray(
            np.concatenate([Dq.values.sign, Kq.values.sign], axis=1),
            np.concatenate([Dq.values.magnitude, Kq.values.magnitude], axis=1),
            schedule.fmt,
            np.concatenate([Dq.values.saturated, Kq.values.saturated], axis=1))
        out.append(QuantizedMatrix(vals, np.concatenate([Dq.delta, Kq.delta], axis=1)))
    return out


def _concat(a: FixedPointArray, b: FixedPointArray) -> FixedPointArray:
    return FixedPointArray(np.concatenate([a.sign, b.sign], axis=-1),
                           np.concatenate([a.magnitude, b.magnitude], axis=-1),
                           a.fmt, np.concatenate([a.saturated, b.saturated], axis=-1))


def run_faulty_filter(schedule: GainSchedule, ev: EnergyVector | None, rng: np.random.Generator,
                      params: MemoryNoiseParams = None, batch: int = 1,
                      overflow: str = "saturate", tilt: float = 0.0, P0=None,
                      gains: list[QuantizedMatrix] = None) -> FilterRun:
    """Simulate ``batch`` independent trials of the filter for ``schedule.N`` steps.

    Parameters
    ----------
    schedule : GainSchedule
        Offline gains.  If it carries a format the filter runs in fixed point
        with ``Q(D_k) x + Q(K_k) Q(y_k)``; otherwise in full precision.
    ev : EnergyVector or None
        Bank energies of the memory holding the estimate.
    rng : numpy.random.Generator
    params : MemoryNoiseParams, optional
    batch : int
        Number of trials simulated side by side.
    overflow : {"saturate", "extend"}
    tilt : float
        Importance-sampling strength; 0 samples flips from the true law.
    P0 : array_like, optional
        Covariance of the true initial state around the initial estimate 0.
        Defaults to ``schedule.P0``.
    gains : list of QuantizedMatrix, optional
        Precomputed ``[Q(D_k) | Q(K_k)]`` blocks, to avoid rebuilding them.

    Returns
    -------
    FilterRun
        ``errors`` has shape ``(batch, c)`` and holds ``x~_N - x_N``.
    """
    params = params or MemoryNoiseParams()
    model, fmt = schedule.model, schedule.fmt
    c, N = model.c, schedule.N
    F, H = model.F, model.H
    Lq, Lr = psd_factor(model.Q), psd_factor(model.R)
    L0 = psd_factor(schedule.P0 if P0 is None else np.asarray(P0, dtype=float))
    x = rng.standard_normal((batch, c)) @ L0.T

    if fmt is None:
        if ev is not None and np.any(np.isfinite(ev.energies)):
            raise ValueError("memory noise needs a fixed-point schedule")
        est = np.zeros((batch, c))
        for k in range(N):
            x = x @ F.T + rng.standard_normal((batch, c)) @ Lq.T
            y = x @ H.T + rng.standard_normal((batch, model.d)) @ Lr.T
            est = est @ schedule.D[k].T + y @ schedule.K[k].T
        return FilterRun(est - x, np.zeros(batch), 0, batch * c * N)

    if ev is not None and ev.fmt != fmt:
        raise ValueError(f"energy vector covers {ev.fmt}, schedule uses {fmt}")
    gains = gains if gains is not None else _combined_gains(schedule)
    p = ev.probabilities(params) if ev is not None else np.zeros(fmt.bits)
    noisy = bool(np.any(p > 0))
    reads = (N + 1) * c
    q = tilted_probabilities(p, fmt, reads, tilt)
    counts = np.zeros((batch, fmt.bits), dtype=np.int64) if tilt > 0 and noisy else None

    def read(stored):
        if not noisy:
            return stored
        return corrupt_array(stored, ev, params, rng, probs=q, flip_counts=counts)

    stored = FixedPointArray.zeros((batch, c), fmt)
    saturated = 0
    for k in range(N):
        x = x @ F.T + rng.standard_normal((batch, c)) @ Lq.T
        y = x @ H.T + rng.standard_normal((batch, model.d)) @ Lr.T
        y_q = FixedPointArray.from_real(y, fmt, overflow)
        stored = fp_matvec(gains[k], _concat(read(stored), y_q), overflow)
        saturated += int(stored.saturated.sum())
    final = read(stored)
    errors = final.to_real() - x
    log_w = (flip_log_likelihood_ratio(counts, reads, p, q) if counts is not None
             else np.zeros(batch))
    return FilterRun(errors, log_w, saturated, batch * c * N)


def _block_moments(cfg: TrialConfig, schedule, gains, block: int, size: int):
    seq = np.random.SeedSequence(cfg.base_seed, spawn_key=(*cfg.stream_key, block))
    rng = np.random.default_rng(seq)
    run = run_faulty_filter(schedule, cfg.ev, rng, cfg.params, size, cfg.overflow, cfg.tilt,
                            cfg.initial_covariance, gains)
    w = np.exp(run.log_weights)
    e = run.errors
    wtr = w * (e * e).sum(axis=1)
    return (np.einsum("t,ti,tj->ij", w, e, e),
            np.einsum("t,ti,tj->ij", w * w, e * e, e * e),
            float(wtr @ wtr), w @ e, float(w.sum()), run.saturated, run.stored)


def estimate_error_covariance(cfg: TrialConfig, threads: int = 1) -> EmpiricalCovariance:
    """Empirical covariance of the final estimation error over ``cfg.trials`` trials.

    Bit-identical for a given ``cfg`` whatever ``threads`` is: blocks have
    their own substreams and are summed in block order.
    """
    schedule = precompute_gains(cfg.model, cfg.initial_covariance, cfg.N, cfg.fmt)
    gains = _combined_gains(schedule) if cfg.fmt is not None else None
    nblocks = math.ceil(cfg.trials / cfg.block_size)
    sizes = [min(cfg.block_size, cfg.trials - i * cfg.block_size) for i in range(nblocks)]

    def work(i):
        return _block_moments(cfg, schedule, gains, i, sizes[i])

    if threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(nblocks)))
    else:
        parts = [work(i) for i in range(nblocks)]

    c = cfg.model.c
    m1, m2 = np.zeros((c, c)), np.zeros((c, c))
    lin, tr2, wsum, sat, stored = np.zeros(c), 0.0, 0.0, 0, 0
    for p1, p2, pt, pl, pw, ps, pn in parts:
        m1 += p1
        m2 += p2
        tr2 += pt
        lin += pl
        wsum += pw
        sat += ps
        stored += pn
    T = cfg.trials
    cov = m1 / T
    var = np.clip(m2 / T - cov ** 2, 0.0, None)
    tr_var = max(tr2 / T - np.trace(cov) ** 2, 0.0)
    rate = sat / stored if stored else 0.0
    if rate > SATURATION_WARN_RATE:
        warnings.warn(f"{100 * rate:.2g}% of stored values saturated in {cfg.fmt}; "
                      "consider more integer bits", SaturationWarning, stacklevel=2)
    return EmpiricalCovariance(0.5 * (cov + cov.T), lin / T, np.sqrt(var / T), T, rate,
                               math.sqrt(tr_var / T), wsum / T)
