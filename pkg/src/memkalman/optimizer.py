"""Minimum-energy bank allocation under an estimation-error constraint.

The error covariance depends on the energies only through the memory noise
variance ``s = sum_b w_b exp(-a e_b)`` with ``w_b = 4**b``, and is affine in
``s``.  A constraint on ``P*_N`` is therefore a ceiling ``s <= s_max`` and the
problem becomes

    minimize sum_b e_b  subject to  sum_b w_b exp(-a e_b) <= s_max,  e_b >= e_thres

whose solution pins low-significance banks at ``e_thres`` and puts the rest on
a logarithmic water line ``e_b = ln(lam a w_b) / a``.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedPointFormat
from .kalman import StateSpaceModel, precompute_gains
from .memory import EnergyVector, MemoryNoiseParams, memory_noise_variance
from .theory import AffineResponse, error_response

_LOG_LAM_BRACKET = (-200.0, 200.0)


@dataclass(frozen=True, eq=False)
class PerformanceConstraint:
    """Ceiling on the final error covariance.

    ``mode="entrywise"`` requires ``P*_N[i, j] <= V[i, j]`` for every entry
    (``inf`` leaves an entry free); ``mode="trace"`` requires
    ``trace(P*_N) <= trace_bound``.
    """

    V: np.ndarray | None = None
    mode: str = "entrywise"
    trace_bound: float | None = None

    def __post_init__(self):
        if self.mode == "entrywise":
            if self.V is None:
                raise ValueError("entrywise constraint needs a matrix V")
            V = np.atleast_2d(np.asarray(self.V, dtype=float))
            if V.shape[0] != V.shape[1]:
                raise ValueError(f"V must be square, got {V.shape}")
            if np.any(np.isnan(V)) or np.any(np.diag(V) <= 0):
                raise ValueError("diagonal of V must be strictly positive")
            object.__setattr__(self, "V", V)
        elif self.mode == "trace":
            if self.trace_bound is None or not self.trace_bound > 0:
                raise ValueError("trace constraint needs a positive trace_bound")
        else:
            raise ValueError(f"unknown constraint mode {self.mode!r}")

    @classmethod
    def position(cls, bound: float, c: int) -> PerformanceConstraint:
        """Bound only ``P*[0, 0]``."""
        V = np.full((c, c), np.inf)
        V[0, 0] = bound
        return cls(V)

    def satisfied(self, P: np.ndarray) -> bool:
        if self.mode == "trace":
            return bool(np.trace(P) <= self.trace_bound)
        return bool(np.all(P <= self.V))

    def violation(self, P: np.ndarray) -> tuple[str, float, float]:
        """Most violated entry as ``(label, value, bound)``, by relative excess."""
        if self.mode == "trace":
            return "trace", float(np.trace(P)), float(self.trace_bound)
        with np.errstate(invalid="ignore", divide="ignore"):
            excess = np.where(np.isfinite(self.V), (P - self.V) / np.abs(self.V), -np.inf)
        i, j = np.unravel_index(np.argmax(excess), excess.shape)
        return f"P[{i},{j}]", float(P[i, j]), float(self.V[i, j])

    def noise_budget(self, response: AffineResponse) -> float:
        """Largest ``s`` with ``A + s G`` feasible; negative if no ``s >= 0`` works."""
        if self.mode == "trace":
            base, slope = np.trace(response.A), np.trace(response.G)
            return (self.trace_bound - base) / slope if slope > 0 else (
                math.inf if base <= self.trace_bound else -math.inf)
        A, G, V = response.A, response.G, self.V
        limit = math.inf
        for i, j in zip(*np.nonzero(np.isfinite(V))):
            if G[i, j] > 0:
                limit = min(limit, (V[i, j] - A[i, j]) / G[i, j])
            elif A[i, j] > V[i, j]:
                return -math.inf
        return limit


@dataclass(frozen=True, eq=False)
class BitwiseSolution:
    """Per-bank energies for one format, or the best over several formats."""

    fmt: FixedPointFormat
    ev: EnergyVector
    e_tot: float
    feasible: bool
    water_level: float | None
    P_star: np.ndarray
    sigma2_gamma: float
    iterations: int = 0
    binding: tuple | None = None

    @property
    def m_opt(self) -> int:
        return self.fmt.m


@dataclass(frozen=True, eq=False)
class LevelSolution:
    """Energies shared by ``L`` contiguous groups of banks, least significant group first."""

    fmt: FixedPointFormat
    L: int
    group_sizes: tuple[int, ...]
    level_energies: np.ndarray
    e_tot: float
    feasible: bool
    ev: EnergyVector | None
    P_star: np.ndarray | None = None
    candidates: int = 1

    @property
    def group_ranges(self) -> list[range]:
        """Bit significances covered by each level."""
        out, lo = [], -self.fmt.m
        for size in self.group_sizes:
            out.append(range(lo, lo + size))
            lo += size
        return out


@dataclass(frozen=True, eq=False)
class BitwiseSweep:
    best: BitwiseSolution
    per_m: list[BitwiseSolution] = field(default_factory=list)


def _response(model, fmt, N, P0, accounting):
    return error_response(precompute_gains(model, P0, N, fmt), accounting)


def _weights(fmt: FixedPointFormat) -> np.ndarray:
    return 4.0 ** fmt.positions.astype(float)


def waterfill_bitwise(model: StateSpaceModel, fmt: FixedPointFormat,
                      constraint: PerformanceConstraint, params: MemoryNoiseParams = None,
                      beta: float = 0.01, xi: float = 1e-8, N: int = 250, P0=None,
                      accounting: str = "exact", response: AffineResponse = None,
                      max_iter: int = 10_000_000) -> BitwiseSolution:
    """Greedy water-filling for one format.

    Starting from ``e_thres`` everywhere, repeatedly add ``beta`` to the bank
    with the largest marginal noise reduction ``w_b a exp(-a e_b)`` (ties go
    to the more significant bank) until the constraint holds.  The loop gives
    up when one increment changes ``P*_N`` by at most ``xi`` in Frobenius
    norm, which means the quantization floor alone violates the constraint.
    """
    params = params or MemoryNoiseParams()
    if not beta > 0 or not xi > 0:
        raise ValueError("beta and xi must be positive")
    if response is None:
        response = _response(model, fmt, N, model.Q if P0 is None else P0, accounting)
    a = params.a
    w = _weights(fmt)
    e = np.full(fmt.bits, params.e_thres)
    contrib = w * np.exp(-a * e)
    s = contrib.sum()
    P = response.at(s)
    it = 0
    feasible = constraint.satisfied(P)
    while not feasible and it < max_iter:
        # last index of the max is the most significant bank among ties
        b = fmt.bits - 1 - int(np.argmax(contrib[::-1]))
        e[b] += beta
        contrib[b] = w[b] * math.exp(-a * e[b])
        s = contrib.sum()
        P_new = response.at(s)
        it += 1
        feasible = constraint.satisfied(P_new)
        if not feasible and np.linalg.norm(P - P_new) <= xi:
            P = P_new
            break
        P = P_new
    active = e > params.e_thres + 0.5 * beta
    lam = float(np.mean(np.exp(a * e[active]) / (a * w[active]))) if active.any() else None
    ev = EnergyVector(e, fmt)
    return BitwiseSolution(fmt, ev, float(e.sum()), feasible, lam, P,
                           memory_noise_variance(ev, params), it,
                           None if feasible else constraint.violation(P))


def optimize_bits_and_energy(model: StateSpaceModel, n: int, M: int,
                             constraint: PerformanceConstraint, params: MemoryNoiseParams = None,
                             beta: float = 0.01, xi: float = 1e-8, N: int = 250, P0=None,
                             accounting: str = "exact", threads: int = 1,
                             m_min: int = 0) -> BitwiseSweep:
    """Water-fill every ``m`` in ``m_min..M`` and keep the cheapest feasible result.

    If no ``m`` is feasible, ``best`` is the solution closest to feasibility
    (smallest relative violation of the binding entry) with ``feasible=False``.
    """
    if M < 1 or m_min > M:
        raise ValueError(f"need 1 <= M and m_min <= M, got M={M}, m_min={m_min}")

    def solve(m):
        return waterfill_bitwise(model, FixedPointFormat(n, m), constraint, params, beta, xi,
                                 N, P0, accounting)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        sols = list(pool.map(solve, range(m_min, M + 1)))
    feasible = [s for s in sols if s.feasible]
    if feasible:
        best = min(feasible, key=lambda s: (s.e_tot, s.fmt.m))
    else:
        best = min(sols, key=lambda s: s.binding[1] / s.binding[2])
    return BitwiseSweep(best, sols)


def _level_energies(W: np.ndarray, sizes: np.ndarray, log_lam: np.ndarray,
                    params: MemoryNoiseParams) -> np.ndarray:
    a = params.a
    arg = log_lam[..., None] + np.log(a * W / sizes)
    return np.maximum(params.e_thres * sizes, sizes / a * arg)


def solve_level_energies(W, sizes, s_max: float, params: MemoryNoiseParams) -> np.ndarray:
    """Level energies for a batch of groupings meeting ``s <= s_max``.

    Parameters
    ----------
    W : array_like, shape (k, L)
        Aggregate bit weight ``sum 4**b`` of each group, one grouping per row.
    sizes : array_like, shape (k, L)
        Number of banks in each group.
    s_max : float
        Memory noise variance allowed.
    params : MemoryNoiseParams

    Returns
    -------
    ndarray, shape (k, L)
        Level energies; bisection on the log water level, rows solved together.
    """
    a = params.a
    W = np.atleast_2d(W)
    sizes = np.atleast_2d(sizes).astype(float)

    def noise(log_lam):
        e = _level_energies(W, sizes, log_lam, params)
        return (W * np.exp(-a * e / sizes)).sum(axis=-1)

    lo = np.full(W.shape[0], _LOG_LAM_BRACKET[0])
    hi = np.full(W.shape[0], _LOG_LAM_BRACKET[1])
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        over = noise(mid) > s_max
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
    return _level_energies(W, sizes, hi, params)


def _group_weights(fmt: FixedPointFormat, sizes) -> np.ndarray:
    w = _weights(fmt)
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return np.array([w[lo:hi].sum() for lo, hi in zip(edges[:-1], edges[1:])])


def _level_solution(fmt, sizes, energies, response, params, candidates=1):
    sizes = tuple(int(v) for v in sizes)
    ev = EnergyVector(np.repeat(np.asarray(energies) / np.asarray(sizes), sizes), fmt)
    s = memory_noise_variance(ev, params)
    return LevelSolution(fmt, len(sizes), sizes, np.asarray(energies, dtype=float),
                         float(np.sum(energies)), True, ev, response.at(s), candidates)


def _infeasible_levels(fmt, L, sizes, response, candidates=1):
    return LevelSolution(fmt, L, tuple(sizes), np.full(L, np.nan), math.inf, False, None,
                         response.A, candidates)


def optimal_level_energies(group_sizes, model: StateSpaceModel, fmt: FixedPointFormat,
                           constraint: PerformanceConstraint, params: MemoryNoiseParams = None,
                           N: int = 250, P0=None, accounting: str = "exact",
                           response: AffineResponse = None) -> LevelSolution:
    """Cheapest level energies for a fixed grouping of the banks.

    Group ``l`` holds ``n_l`` consecutive banks (least significant group
    first) that all get ``e_b = E_l / n_l``.  The optimum is
    ``E_l = max(e_thres n_l, (n_l / a) ln(lam a W_l / n_l))`` with
    ``W_l = sum_{b in group l} 4**b``; the water level ``lam`` is found by
    bisection so the constraint is met with equality.
    """
    params = params or MemoryNoiseParams()
    sizes = np.asarray(group_sizes, dtype=int)
    if sizes.sum() != fmt.bits or np.any(sizes < 1):
        raise ValueError(f"group sizes {list(sizes)} must be positive and sum to {fmt.bits}")
    if response is None:
        response = _response(model, fmt, N, model.Q if P0 is None else P0, accounting)
    s_max = constraint.noise_budget(response)
    if not s_max > 0:
        return _infeasible_levels(fmt, sizes.size, sizes, response)
    W = _group_weights(fmt, sizes)
    energies = solve_level_energies(W, sizes, s_max, params)[0]
    return _level_solution(fmt, sizes, energies, response, params)


def compositions(B: int, L: int) -> np.ndarray:
    """All ways to cut ``B`` ordered banks into ``L`` nonempty contiguous groups."""
    if not 1 <= L <= B:
        raise ValueError(f"need 1 <= L <= B, got L={L}, B={B}")
    combos = list(itertools.combinations(range(1, B), L - 1))
    cuts = np.array(combos, dtype=int).reshape(len(combos), L - 1)
    edges = np.hstack([np.zeros((cuts.shape[0], 1), int), cuts, np.full((cuts.shape[0], 1), B)])
    return np.diff(edges, axis=1)


def optimize_levels(model: StateSpaceModel, fmt: FixedPointFormat,
                    constraint: PerformanceConstraint, L: int, params: MemoryNoiseParams = None,
                    N: int = 250, P0=None, accounting: str = "exact",
                    response: AffineResponse = None) -> LevelSolution:
    """Best ``L``-level allocation over every contiguous grouping of the banks."""
    params = params or MemoryNoiseParams()
    if response is None:
        response = _response(model, fmt, N, model.Q if P0 is None else P0, accounting)
    comps = compositions(fmt.bits, L)
    s_max = constraint.noise_budget(response)
    if not s_max > 0:
        return _infeasible_levels(fmt, L, comps[0], response, len(comps))
    w = _weights(fmt)
    csum = np.concatenate([[0.0], np.cumsum(w)])
    edges = np.hstack([np.zeros((comps.shape[0], 1), int), np.cumsum(comps, axis=1)])
    W = csum[edges[:, 1:]] - csum[edges[:, :-1]]
    energies = solve_level_energies(W, comps, s_max, params)
    totals = energies.sum(axis=1)
    best = int(np.argmin(totals))
    return _level_solution(fmt, comps[best], energies[best], response, params, len(comps))


def uniform_allocation_baseline(model: StateSpaceModel, fmt: FixedPointFormat,
                                constraint: PerformanceConstraint,
                                params: MemoryNoiseParams = None, N: int = 250, P0=None,
                                accounting: str = "exact", response: AffineResponse = None,
                                tol: float = 1e-9) -> BitwiseSolution:
    """Smallest shared bank energy meeting the constraint, found by bisection."""
    params = params or MemoryNoiseParams()
    if response is None:
        response = _response(model, fmt, N, model.Q if P0 is None else P0, accounting)
    a, w = params.a, _weights(fmt)

    def P_at(e):
        return response.at(float((w * math.exp(-a * e)).sum()))

    lo = params.e_thres
    if constraint.satisfied(P_at(lo)):
        e = lo
    else:
        hi = lo + 1.0
        while not constraint.satisfied(P_at(hi)):
            hi = lo + 2 * (hi - lo)
            if hi > 1e4:
                ev = EnergyVector(np.full(fmt.bits, np.inf), fmt)
                return BitwiseSolution(fmt, ev, math.inf, False, None, response.A, 0.0, 0,
                                       constraint.violation(response.A))
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if constraint.satisfied(P_at(mid)):
                hi = mid
            else:
                lo = mid
        e = hi
    ev = EnergyVector(np.full(fmt.bits, e), fmt)
    s = memory_noise_variance(ev, params)
    return BitwiseSolution(fmt, ev, e * fmt.bits, True, None, response.at(s), s)


def brute_force_bitwise(fmt: FixedPointFormat, s_max: float, params: MemoryNoiseParams = None,
                        step: float = 0.0025) -> tuple[float, np.ndarray]:
    """Exhaustive grid search for the cheapest energies with ``s <= s_max``.

    Each bank's energy ranges over ``e_thres + step * k`` up to the level
    where its own noise contribution drops below ``s_max / B`` (no optimum
    spends more).  The two halves of the banks are enumerated separately and
    joined exactly through a sorted prefix minimum, so every grid point is
    effectively visited.  Meant for ``B <= 6``.
    """
    params = params or MemoryNoiseParams()
    a, w, B = params.a, _weights(fmt), fmt.bits
    grids = []
    for wb in w:
        top = max(params.e_thres, math.log(wb * B / s_max) / a) + 2 * step
        grids.append(params.e_thres + step * np.arange(int(math.ceil((top - params.e_thres) / step)) + 1))

    def enumerate_half(idx):
        if not idx:
            return np.zeros(1), np.zeros(1), np.zeros((1, 0))
        mesh = np.meshgrid(*[grids[i] for i in idx], indexing="ij")
        E = np.stack([m.ravel() for m in mesh], axis=1)
        noise = (w[list(idx)] * np.exp(-a * E)).sum(axis=1)
        return E.sum(axis=1), noise, E

    half = B // 2
    e1, n1, E1 = enumerate_half(list(range(half)))
    e2, n2, E2 = enumerate_half(list(range(half, B)))
    order = np.argsort(n2)
    n2s = n2[order]
    e2s = e2[order]
    run_min = np.minimum.accumulate(e2s)
    pos = np.searchsorted(n2s, s_max - n1, side="right") - 1
    ok = pos >= 0
    if not np.any(ok):
        return math.inf, np.full(B, np.nan)
    total = np.where(ok, e1 + run_min[np.clip(pos, 0, None)], np.inf)
    i = int(np.argmin(total))
    j = order[int(np.argmin(e2s[:pos[i] + 1]))]
    return float(total[i]), np.concatenate([E1[i], E2[j]])


def brute_force_two_levels(fmt: FixedPointFormat, group_sizes, s_max: float,
                           params: MemoryNoiseParams = None,
                           step: float = 0.0025) -> tuple[float, np.ndarray]:
    """Grid search over two level energies ``(E_0, E_1)`` for a fixed grouping.

    Each axis runs from ``e_thres n_l`` up to the total cost of the uniform
    allocation, an upper bound on any single level of the optimum.
    """
    params = params or MemoryNoiseParams()
    sizes = np.asarray(group_sizes, dtype=int)
    if sizes.size != 2:
        raise ValueError("exactly two groups expected")
    a = params.a
    W = _group_weights(fmt, sizes)
    # no level spends more than the whole uniform allocation does
    e_uniform = max(params.e_thres, math.log(W.sum() / s_max) / a)
    axes = []
    for nl in sizes:
        lo = params.e_thres * nl
        top = max(lo, fmt.bits * e_uniform) + 2 * step
        axes.append(lo + step * np.arange(int(math.ceil((top - lo) / step)) + 1))
    E0, E1 = np.meshgrid(*axes, indexing="ij")
    noise = W[0] * np.exp(-a * E0 / sizes[0]) + W[1] * np.exp(-a * E1 / sizes[1])
    total = np.where(noise <= s_max, E0 + E1, np.inf)
    i, j = np.unravel_index(np.argmin(total), total.shape)
    return float(total[i, j]), np.array([E0[i, j], E1[i, j]])
