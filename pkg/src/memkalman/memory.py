"""Energy-scalable unreliable memory.

Each bit position ``b`` of a stored fixed-point word lives in its own bank
with energy ``e_b``.  A read returns the stored bit XOR-ed with a Bernoulli
flip of probability ``p_b = exp(-a * e_b)``.  Sign bits are held in reliable
storage and never flip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import FixedPointArray, FixedPointFormat, FixedPointValue

# above this flip probability a dense uniform mask is cheaper than index sampling
_DENSE_THRESHOLD = 0.05


@dataclass(frozen=True)
class MemoryNoiseParams:
    """Technology factor ``a`` and the per-bank energy floor ``e_thres``."""

    a: float = 12.8
    e_thres: float = 0.1

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if not self.e_thres >= 0:
            raise ValueError(f"e_thres must be >= 0, got {self.e_thres}")


@dataclass(frozen=True, eq=False)
class EnergyVector:
    """Per-bank energies ``e_{-m}, ..., e_{n-1}``, least significant first.

    ``inf`` is allowed and means a perfectly reliable bank.
    """

    energies: np.ndarray
    fmt: FixedPointFormat

    def __post_init__(self):
        e = np.array(self.energies, dtype=float).reshape(-1)
        if e.size != self.fmt.bits:
            raise ValueError(f"expected {self.fmt.bits} energies for {self.fmt}, got {e.size}")
        if np.any(np.isnan(e)) or np.any(e < 0):
            raise ValueError("energies must be >= 0")
        e.setflags(write=False)
        object.__setattr__(self, "energies", e)

    @classmethod
    def uniform(cls, fmt: FixedPointFormat, e_tot: float) -> EnergyVector:
        """Spread ``e_tot`` evenly over all ``B`` banks."""
        return cls(np.full(fmt.bits, e_tot / fmt.bits), fmt)

    @classmethod
    def reliable(cls, fmt: FixedPointFormat) -> EnergyVector:
        return cls(np.full(fmt.bits, np.inf), fmt)

    def __eq__(self, other):
        return (isinstance(other, EnergyVector) and self.fmt == other.fmt
                and np.array_equal(self.energies, other.energies))

    def __hash__(self):
        return hash((self.fmt, self.energies.tobytes()))

    def __len__(self):
        return self.energies.size

    def probabilities(self, params: MemoryNoiseParams) -> np.ndarray:
        return bit_flip_probability(self.energies, params.a)


def bit_flip_probability(e_b, a: float):
    """Flip probability ``exp(-a * e_b)`` for one bank or an array of banks."""
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    e = np.asarray(e_b, dtype=float)
    if np.any(e < 0):
        raise ValueError("energies must be >= 0")
    p = np.exp(-a * e)
    return float(p) if p.ndim == 0 else p


def memory_noise_variance(ev: EnergyVector, params: MemoryNoiseParams) -> float:
    """Value-level variance ``sum_b 4**b p_b`` of bit-flip noise on one stored word."""
    weights = 4.0 ** ev.fmt.positions.astype(float)
    return float(np.dot(weights, ev.probabilities(params)))


def total_energy(ev: EnergyVector) -> float:
    return float(np.sum(ev.energies))


def corrupt(v: FixedPointValue, ev: EnergyVector, params: MemoryNoiseParams,
            rng: np.random.Generator) -> FixedPointValue:
    """Read one stored value through the faulty banks."""
    if ev.fmt != v.fmt:
        raise ValueError(f"energy vector covers {ev.fmt}, value is {v.fmt}")
    p = ev.probabilities(params)
    flips = rng.random(p.size) < p
    mask = sum(1 << i for i in np.flatnonzero(flips))
    return FixedPointValue(v.sign, v.magnitude ^ mask, v.fmt)


def corrupt_array(values: FixedPointArray, ev: EnergyVector, params: MemoryNoiseParams,
                  rng: np.random.Generator, probs=None, flip_counts=None) -> FixedPointArray:
    """Read every element of ``values`` through the faulty banks.

    Parameters
    ----------
    values : FixedPointArray
        Stored words, any shape.
    ev, params
        Bank energies and technology factor giving the flip probabilities.
    rng : numpy.random.Generator
        Source of randomness; the only state touched.
    probs : array_like, optional
        Flip probabilities to sample from instead of the ones implied by
        ``ev``.  Used by importance-sampled Monte Carlo, which corrects the
        bias with likelihood-ratio weights built from ``flip_counts``.
    flip_counts : ndarray, optional
        Array of shape ``(values.shape[0], B)``, incremented in place with the
        number of flips per leading index and bit.

    Returns
    -------
    FixedPointArray
        Same signs, magnitudes with the sampled bits inverted.  Bits above
        ``B`` (present only with overflow extension) are never touched.
    """
    if ev.fmt != values.fmt:
        raise ValueError(f"energy vector covers {ev.fmt}, values are {values.fmt}")
    p = ev.probabilities(params) if probs is None else np.asarray(probs, dtype=float)
    mag = values.magnitude.copy()
    flat = mag.reshape(-1)
    size = flat.size
    row = int(np.prod(values.shape[1:])) if len(values.shape) > 1 else 1
    for bit, pb in enumerate(p):
        if pb <= 0.0 or size == 0:
            continue
        if pb >= _DENSE_THRESHOLD:
            idx = np.flatnonzero(rng.random(size) < pb)
        else:
            k = rng.binomial(size, pb)
            if k == 0:
                continue
            idx = rng.choice(size, k, replace=False)
        flat[idx] ^= 1 << bit
        if flip_counts is not None:
            flip_counts[:, bit] += np.bincount(idx // row, minlength=flip_counts.shape[0])
    return FixedPointArray(values.sign, mag, values.fmt, values.saturated)


def flip_log_likelihood_ratio(flip_counts: np.ndarray, reads: int, p, q) -> np.ndarray:
    """Log weight ``log P_p(flips) - log P_q(flips)`` per row of ``flip_counts``.

    ``reads`` is the number of Bernoulli trials per bit behind each row.
    Banks where ``q == p`` contribute nothing.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    tilted = q != p
    if not np.any(tilted):
        return np.zeros(flip_counts.shape[0])
    p, q = p[tilted], q[tilted]
    counts = flip_counts[:, tilted].astype(float)
    with np.errstate(divide="ignore"):
        log_hit = np.log(p) - np.log(q)
        log_miss = np.log1p(-p) - np.log1p(-q)
    # p == 0 with a flip observed has zero likelihood under the true law
    hit = np.where(counts > 0, counts * log_hit, 0.0)
    return hit.sum(axis=1) + (reads - counts) @ log_miss


def tilted_probabilities(p, fmt: FixedPointFormat, reads: int, tilt: float) -> np.ndarray:
    """Sampling probabilities that oversample the banks driving the noise variance.

    Bank ``b`` is sampled with ``max(p_b, min(0.5, lam_b / reads))`` where
    ``lam_b = tilt * 4**b p_b / max_b' 4**b' p_b'``: the dominant bank gets
    about ``tilt`` expected flips per trial, the others proportionally fewer.
    """
    p = np.asarray(p, dtype=float)
    if tilt <= 0:
        return p.copy()
    contrib = 4.0 ** fmt.positions.astype(float) * p
    top = contrib.max()
    if top <= 0:
        return p.copy()
    lam = tilt * contrib / top
    q = np.maximum(p, np.minimum(0.5, lam / reads))
    return np.where(p > 0.5, p, q)


def energy_for_probability(p: float, a: float) -> float:
    """Inverse of :func:`bit_flip_probability`."""
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    return -math.log(p) / a
