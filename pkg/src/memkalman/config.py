"""Flat ``key = value`` experiment configuration.

Lines look like ``key = value``; ``#`` starts a comment.  Lists are
whitespace or comma separated, integer ranges may be written ``lo:hi`` or
``lo:hi:step`` (inclusive), and ``inf`` is accepted wherever an energy or bound
is expected.  ``include = path`` pulls in another file (resolved relative to
the including file); keys of the including file win.  Custom models give
``c``, ``d`` and the matrices ``F``, ``H``, ``Q``, ``R`` (and optionally ``P0``)
as dense row-major lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kalman import StateSpaceModel
from .memory import MemoryNoiseParams
from .optimizer import PerformanceConstraint
from .scenarios import PRESETS, Scenario, get_scenario


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


KNOWN_KEYS = {
    "scenario", "include", "c", "d", "F", "H", "Q", "R", "P0", "n", "m", "e_tot", "N", "a",
    "e_thres", "trials", "seed", "overflow", "tilt", "accounting", "block_size", "mode", "M",
    "m_min", "beta", "xi", "V", "trace_bound", "levels", "threads",
}


def _read_pairs(path: Path, seen: set) -> dict[str, tuple[str, str]]:
    """``key -> (raw value, origin)`` with includes expanded."""
    path = path.resolve()
    if path in seen:
        raise ConfigError("include", f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError("include" if seen else "config", f"file not found: {path}")
    seen = seen | {path}
    own: dict[str, tuple[str, str]] = {}
    merged: dict[str, tuple[str, str]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name}:{lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(key, f"unknown key ({path.name}:{lineno})")
        if key in own:
            raise ConfigError(key, f"duplicate key ({path.name}:{lineno})")
        origin = f"{path.name}:{lineno}"
        if key == "include":
            merged.update(_read_pairs(path.parent / value, seen))
        own[key] = (value, origin)
    merged.update(own)
    merged.pop("include", None)
    return merged


def _tokens(value: str) -> list[str]:
    return value.replace(",", " ").split()


def _float(key: str, token: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise ConfigError(key, f"not a number: {token!r}") from None


def _int(key: str, token: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ConfigError(key, f"not an integer: {token!r}") from None


def _int_list(key: str, value: str) -> list[int]:
    out = []
    for tok in _tokens(value):
        if ":" in tok:
            parts = [_int(key, p) for p in tok.split(":")]
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] <= 0):
                raise ConfigError(key, f"bad range {tok!r}, expected lo:hi or lo:hi:step")
            step = parts[2] if len(parts) == 3 else 1
            out.extend(range(parts[0], parts[1] + 1, step))
        else:
            out.append(_int(key, tok))
    if not out:
        raise ConfigError(key, "empty grid")
    return out


def _float_list(key: str, value: str) -> list[float]:
    out = [_float(key, tok) for tok in _tokens(value)]
    if not out:
        raise ConfigError(key, "empty grid")
    if any(math.isnan(v) for v in out):
        raise ConfigError(key, "nan is not allowed")
    return out


def _matrix(key: str, value: str, shape) -> np.ndarray:
    vals = _float_list(key, value)
    if len(vals) != shape[0] * shape[1]:
        raise ConfigError(key, f"expected {shape[0]}x{shape[1]} = {shape[0] * shape[1]} "
                               f"row-major entries, got {len(vals)}")
    return np.array(vals).reshape(shape)


def _fmt_float(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Resolved experiment settings, see module docstring for the file format."""

    scenario: Scenario
    n: int
    m: list[int]
    e_tot: list[float]
    N: int = 250
    params: MemoryNoiseParams = field(default_factory=MemoryNoiseParams)
    trials: int = 100_000
    seed: int = 0
    overflow: str = "saturate"
    tilt: float = 0.0
    accounting: str = "exact"
    block_size: int = 10_000
    mode: str = "bitwise"
    M: int = 24
    m_min: int = 0
    beta: float = 0.01
    xi: float = 1e-8
    constraint: PerformanceConstraint | None = None
    levels: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7])
    threads: int = 1

    @property
    def model(self) -> StateSpaceModel:
        return self.scenario.model

    def resolved(self) -> list[tuple[str, str]]:
        """Every setting as ``(key, text)`` in a fixed order, for output headers.

        ``threads`` is left out on purpose: it never changes results.
        """
        sc = self.scenario
        items = [("scenario", sc.name), ("c", str(sc.model.c)), ("d", str(sc.model.d))]
        for name in ("F", "H", "Q", "R"):
            items.append((name, " ".join(_fmt_float(v) for v in getattr(sc.model, name).ravel())))
        items.append(("P0", " ".join(_fmt_float(v) for v in np.asarray(sc.P0).ravel())))
        items += [
            ("n", str(self.n)), ("m", " ".join(map(str, self.m))),
            ("e_tot", " ".join(_fmt_float(v) for v in self.e_tot)), ("N", str(self.N)),
            ("a", _fmt_float(self.params.a)), ("e_thres", _fmt_float(self.params.e_thres)),
            ("trials", str(self.trials)), ("seed", str(self.seed)),
            ("overflow", self.overflow), ("tilt", _fmt_float(self.tilt)),
            ("accounting", self.accounting), ("block_size", str(self.block_size)),
            ("mode", self.mode), ("M", str(self.M)), ("m_min", str(self.m_min)),
            ("beta", _fmt_float(self.beta)), ("xi", _fmt_float(self.xi)),
            ("levels", " ".join(map(str, self.levels))),
        ]
        con = self.constraint
        if con is None:
            items.append(("constraint", "none"))
        elif con.mode == "trace":
            items.append(("trace_bound", _fmt_float(con.trace_bound)))
        else:
            items.append(("V", " ".join(_fmt_float(v) for v in con.V.ravel())))
        return items


def _custom_scenario(pairs) -> Scenario:
    def need(key):
        if key not in pairs:
            raise ConfigError(key, "required for a custom model")
        return pairs[key][0]

    c = _int("c", need("c"))
    d = _int("d", need("d"))
    if c < 1 or d < 1:
        raise ConfigError("c" if c < 1 else "d", "dimensions must be >= 1")
    F = _matrix("F", need("F"), (c, c))
    H = _matrix("H", need("H"), (d, c))
    Q = _matrix("Q", need("Q"), (c, c))
    R = _matrix("R", need("R"), (d, d))
    try:
        model = StateSpaceModel(F, H, Q, R, name="custom")
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None
    P0 = _matrix("P0", pairs["P0"][0], (c, c)) if "P0" in pairs else Q.copy()
    n = _int("n", need("n"))
    return Scenario("custom", model, P0, n)


def load_config(path, seed: int | None = None, trials: int | None = None,
                threads: int | None = None) -> ExperimentConfig:
    """Parse and validate a config file; command-line overrides win.

    Raises
    ------
    ConfigError
        With the offending key in ``field``.
    """
    pairs = _read_pairs(Path(path), set())
    get = {k: v for k, (v, _) in pairs.items()}

    name = get.get("scenario", "tracking2d")
    if name == "custom":
        scenario = _custom_scenario(pairs)
    elif name in PRESETS:
        for key in ("c", "d", "F", "H", "Q", "R", "P0"):
            if key in get:
                raise ConfigError(key, f"only allowed with scenario = custom, not {name}")
        scenario = get_scenario(name)
    else:
        raise ConfigError("scenario", f"unknown scenario {name!r}; "
                                      f"choose from {sorted(PRESETS) + ['custom']}")
    c = scenario.model.c

    n = _int("n", get["n"]) if "n" in get else scenario.n
    if n < 0:
        raise ConfigError("n", "must be >= 0")
    m = _int_list("m", get.get("m", "4:20"))
    if min(m) < 0:
        raise ConfigError("m", "must be >= 0")
    if n + min(m) < 1:
        raise ConfigError("m", "every format needs at least one magnitude bit")
    e_tot = _float_list("e_tot", get.get("e_tot", "inf"))
    if min(e_tot) < 0:
        raise ConfigError("e_tot", "energies must be >= 0")

    def pos_int(key, default, lo=1):
        v = _int(key, get[key]) if key in get else default
        if v < lo:
            raise ConfigError(key, f"must be >= {lo}")
        return v

    def real(key, default):
        return _float(key, get[key]) if key in get else default

    N = pos_int("N", scenario.N)
    try:
        params = MemoryNoiseParams(real("a", 12.8), real("e_thres", 0.1))
    except ValueError as exc:
        raise ConfigError("a" if "a must" in str(exc) else "e_thres", str(exc)) from None
    trials_v = trials if trials is not None else pos_int("trials", 100_000, lo=0)
    if trials_v < 1:
        raise ConfigError("trials", "must be >= 1")
    seed_v = seed if seed is not None else pos_int("seed", 0, lo=0)
    if seed_v < 0 or seed_v >= 2 ** 64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    threads_v = threads if threads is not None else pos_int("threads", 1)
    if threads_v < 1:
        raise ConfigError("threads", "must be >= 1")

    overflow = get.get("overflow", "saturate")
    if overflow not in ("saturate", "extend"):
        raise ConfigError("overflow", "must be saturate or extend")
    accounting = get.get("accounting", "exact")
    if accounting not in ("exact", "full"):
        raise ConfigError("accounting", "must be exact or full")
    mode = get.get("mode", "bitwise")
    if mode not in ("bitwise", "levels", "uniform"):
        raise ConfigError("mode", "must be bitwise, levels or uniform")
    tilt = real("tilt", 0.0)
    if tilt < 0:
        raise ConfigError("tilt", "must be >= 0")
    beta, xi = real("beta", 0.01), real("xi", 1e-8)
    if not beta > 0:
        raise ConfigError("beta", "must be > 0")
    if not xi > 0:
        raise ConfigError("xi", "must be > 0")
    M = pos_int("M", 24)
    m_min = pos_int("m_min", 0, lo=0)
    if m_min > M:
        raise ConfigError("m_min", "must be <= M")
    if n + m_min < 1:
        raise ConfigError("m_min", "every format needs at least one magnitude bit")
    levels = _int_list("levels", get.get("levels", "1:7"))

    if "V" in get and "trace_bound" in get:
        raise ConfigError("V", "give either V or trace_bound, not both")
    constraint = None
    try:
        if "V" in get:
            constraint = PerformanceConstraint(_matrix("V", get["V"], (c, c)))
        elif "trace_bound" in get:
            constraint = PerformanceConstraint(mode="trace",
                                               trace_bound=_float("trace_bound", get["trace_bound"]))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("V" if "V" in get else "trace_bound", str(exc)) from None

    return ExperimentConfig(
        scenario=scenario, n=n, m=m, e_tot=e_tot, N=N, params=params, trials=trials_v,
        seed=seed_v, overflow=overflow, tilt=tilt, accounting=accounting,
        block_size=pos_int("block_size", 10_000), mode=mode, M=M, m_min=m_min, beta=beta,
        xi=xi, constraint=constraint, levels=levels, threads=threads_v)
