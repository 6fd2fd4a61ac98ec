"""Command-line driver.

Verbs: ``theory-sweep``, ``mc-sweep``, ``optimize`` and ``validate-config``.
Every CSV starts with ``# key = value`` lines holding the resolved config and
seed, followed by one header row and the data rows.  With ``--out`` a PNG
figure is written next to the CSV (``--no-figure`` turns it off).

Exit codes: 0 success, 2 configuration error, 3 infeasible optimization.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .fixedpoint import FixedPointFormat
from .kalman import precompute_gains
from .memory import EnergyVector, memory_noise_variance
from .montecarlo import TrialConfig, estimate_error_covariance
from .optimizer import (optimize_bits_and_energy, optimize_levels, uniform_allocation_baseline,
                        waterfill_bitwise)
from .theory import error_response, run_error_recursion

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3
VALIDITY_MAX_P = 0.1

log = logging.getLogger("memkalman")


def _fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.16e" % v


def render_csv(cfg: ExperimentConfig, columns: list[str], rows: list[dict],
               extra_header: list[tuple[str, str]] = ()) -> str:
    """CSV text with the provenance header; identical inputs give identical bytes."""
    buf = io.StringIO()
    for key, value in [*cfg.resolved(), *extra_header]:
        buf.write(f"# {key} = {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt_value(row[col]) for col in columns])
    return buf.getvalue()


def _energy_vector(fmt: FixedPointFormat, e_tot: float) -> EnergyVector:
    return EnergyVector.reliable(fmt) if math.isinf(e_tot) else EnergyVector.uniform(fmt, e_tot)


def _grid(cfg: ExperimentConfig):
    for m in cfg.m:
        for e_tot in cfg.e_tot:
            yield m, e_tot


def _point_info(cfg, fmt, ev):
    p = ev.probabilities(cfg.params)
    max_p = float(p.max())
    return {"sigma2_gamma": memory_noise_variance(ev, cfg.params), "max_p": max_p,
            "valid": max_p <= VALIDITY_MAX_P}


def theory_rows(cfg: ExperimentConfig) -> tuple[list[str], list[dict]]:
    c = cfg.model.c
    cols = ["m", "e_tot", "sigma2_gamma", "max_p", "valid"]
    cols += [f"theory_var_{i}" for i in range(c)] + ["theory_trace"]
    rows = []
    for m in cfg.m:
        fmt = FixedPointFormat(cfg.n, m)
        schedule = precompute_gains(cfg.model, cfg.scenario.P0, cfg.N, fmt)
        for e_tot in cfg.e_tot:
            ev = _energy_vector(fmt, e_tot)
            row = {"m": m, "e_tot": e_tot, **_point_info(cfg, fmt, ev)}
            P = run_error_recursion(schedule, row["sigma2_gamma"], cfg.accounting)[-1].P_star
            row.update({f"theory_var_{i}": P[i, i] for i in range(c)})
            row["theory_trace"] = float(np.trace(P))
            rows.append(row)
    return cols, rows


def mc_rows(cfg: ExperimentConfig) -> tuple[list[str], list[dict]]:
    c = cfg.model.c
    _, rows = theory_rows(cfg)
    cols = ["m", "e_tot", "sigma2_gamma", "max_p", "valid"]
    cols += [f"theory_var_{i}" for i in range(c)]
    cols += [f"mc_var_{i}" for i in range(c)] + [f"mc_var_{i}_se" for i in range(c)]
    cols += ["theory_trace", "mc_trace", "mc_trace_se", "rel_err_var_0", "rel_err_trace",
             "saturation_rate", "weight_mean", "trials"]
    for index, row in enumerate(rows):
        fmt = FixedPointFormat(cfg.n, row["m"])
        tc = TrialConfig(cfg.model, fmt, _energy_vector(fmt, row["e_tot"]), cfg.params, cfg.N,
                         cfg.trials, cfg.seed, cfg.scenario.P0, cfg.overflow, cfg.tilt,
                         cfg.block_size, cfg.scenario.name, stream_key=(index,))
        log.info("simulating m=%d e_tot=%s (%d trials)", row["m"], row["e_tot"], cfg.trials)
        emp = estimate_error_covariance(tc, threads=cfg.threads)
        row.update({f"mc_var_{i}": emp.cov[i, i] for i in range(c)})
        row.update({f"mc_var_{i}_se": emp.stderr[i, i] for i in range(c)})
        row.update(mc_trace=emp.trace, mc_trace_se=emp.trace_stderr,
                   saturation_rate=emp.saturation_rate, weight_mean=emp.weight_mean,
                   trials=emp.trials)
        row["rel_err_var_0"] = (emp.cov[0, 0] - row["theory_var_0"]) / row["theory_var_0"]
        row["rel_err_trace"] = (emp.trace - row["theory_trace"]) / row["theory_trace"]
    return cols, rows


ENERGY_COLUMNS = ["solution", "m", "L", "bit", "energy", "flip_probability"]


def _energy_rows(label, fmt, ev, L, params):
    p = ev.probabilities(params)
    return [{"solution": label, "m": fmt.m, "L": L, "bit": int(b), "energy": e,
             "flip_probability": pb}
            for b, e, pb in zip(fmt.positions, ev.energies, p)]


def _describe(P) -> str:
    return " ".join(_fmt_value(v) for v in np.asarray(P).ravel())


def optimize_report(cfg: ExperimentConfig):
    """Run the configured optimizer.

    Returns
    -------
    feasible : bool
    rows : list of dict
        Per-bank energies.
    report : list of (key, value)
        Structured summary.
    figure : tuple
        Arguments for :func:`~memkalman.plotting.plot_allocation`.
    """
    if cfg.constraint is None:
        raise ConfigError("V", "optimize needs a constraint: give V or trace_bound")
    con, model, P0, params = cfg.constraint, cfg.model, cfg.scenario.P0, cfg.params
    if con.mode == "entrywise" and con.V.shape != (model.c, model.c):
        raise ConfigError("V", f"must be {model.c}x{model.c}")
    common = dict(N=cfg.N, P0=P0, accounting=cfg.accounting)
    rows, report, bars = [], [("mode", cfg.mode)], {}

    if cfg.mode == "bitwise":
        sweep = optimize_bits_and_energy(model, cfg.n, cfg.M, con, params, cfg.beta, cfg.xi,
                                         threads=cfg.threads, m_min=cfg.m_min, **common)
        ms, totals = [], []
        for sol in sweep.per_m:
            ms.append(sol.fmt.m)
            if not sol.feasible:
                totals.append(math.inf)
                report.append((f"m={sol.fmt.m}", f"infeasible: {sol.binding[0]} floor "
                               f"{_fmt_value(sol.binding[1])} > bound {_fmt_value(sol.binding[2])}"))
                continue
            uni = uniform_allocation_baseline(model, sol.fmt, con, params, **common)
            totals.append(sol.e_tot)
            report.append((f"m={sol.fmt.m}", f"e_tot {_fmt_value(sol.e_tot)} uniform "
                           f"{_fmt_value(uni.e_tot)} gain {_fmt_value(1 - sol.e_tot / uni.e_tot)}"))
            rows += _energy_rows("bitwise", sol.fmt, sol.ev, sol.fmt.bits, params)
            rows += _energy_rows("uniform", uni.fmt, uni.ev, 1, params)
        best = sweep.best
        feasible = best.feasible
        report.append(("feasible", str(int(feasible))))
        if feasible:
            uni = uniform_allocation_baseline(model, best.fmt, con, params, **common)
            feasible_ms = [s.fmt.m for s in sweep.per_m if s.feasible]
            min_m = min(feasible_ms)
            at_min = next(s for s in sweep.per_m if s.fmt.m == min_m)
            uni_min = uniform_allocation_baseline(model, at_min.fmt, con, params, **common)
            report += [
                ("m_opt", str(best.fmt.m)), ("e_tot", _fmt_value(best.e_tot)),
                ("uniform_e_tot", _fmt_value(uni.e_tot)),
                ("gain_vs_uniform", _fmt_value(1 - best.e_tot / uni.e_tot)),
                ("water_level", _fmt_value(best.water_level if best.water_level else math.nan)),
                ("sigma2_gamma", _fmt_value(best.sigma2_gamma)),
                ("P_star", _describe(best.P_star)),
                ("energies", " ".join(_fmt_value(e) for e in best.ev.energies)),
                ("m_min_feasible", str(min_m)),
                ("gain_at_m_min_feasible", _fmt_value(1 - at_min.e_tot / uni_min.e_tot)),
            ]
            bars = {"water-filling": (best.fmt.positions, best.ev.energies),
                    "uniform": (uni.fmt.positions, uni.ev.energies)}
        else:
            label, value, bound = best.binding
            report.append(("binding", f"{label} = {_fmt_value(value)} exceeds "
                                      f"{_fmt_value(bound)} for every m in {cfg.m_min}..{cfg.M}"))
        return feasible, rows, report, (bars, ("fractional bits m", ms, totals))

    if cfg.mode == "uniform":
        any_ok, ms, totals = False, [], []
        for m in cfg.m:
            fmt = FixedPointFormat(cfg.n, m)
            uni = uniform_allocation_baseline(model, fmt, con, params, **common)
            ms.append(m)
            totals.append(uni.e_tot)
            if uni.feasible:
                any_ok = True
                rows += _energy_rows("uniform", fmt, uni.ev, 1, params)
                report.append((f"m={m}", f"e_tot {_fmt_value(uni.e_tot)}"))
                bars = {"uniform": (fmt.positions, uni.ev.energies)}
            else:
                report.append((f"m={m}", f"infeasible: {uni.binding[0]} floor "
                               f"{_fmt_value(uni.binding[1])} > bound {_fmt_value(uni.binding[2])}"))
        report.append(("feasible", str(int(any_ok))))
        return any_ok, rows, report, (bars, ("fractional bits m", ms, totals))

    # levels
    any_ok, curve = False, None
    for m in cfg.m:
        fmt = FixedPointFormat(cfg.n, m)
        response = error_response(precompute_gains(model, P0, cfg.N, fmt), cfg.accounting)
        bit = waterfill_bitwise(model, fmt, con, params, cfg.beta, cfg.xi, response=response)
        uni = uniform_allocation_baseline(model, fmt, con, params, response=response)
        if not bit.feasible:
            report.append((f"m={m}", f"infeasible: {bit.binding[0]} floor "
                           f"{_fmt_value(bit.binding[1])} > bound {_fmt_value(bit.binding[2])}"))
            continue
        any_ok = True
        report.append((f"m={m} bitwise_e_tot", _fmt_value(bit.e_tot)))
        report.append((f"m={m} uniform_e_tot", _fmt_value(uni.e_tot)))
        Ls, totals = [], []
        for L in cfg.levels:
            if not 1 <= L <= fmt.bits:
                raise ConfigError("levels", f"L={L} outside 1..{fmt.bits} for {fmt}")
            sol = optimize_levels(model, fmt, con, L, params, response=response)
            Ls.append(L)
            totals.append(sol.e_tot)
            savings = (uni.e_tot - sol.e_tot) / (uni.e_tot - bit.e_tot) if uni.e_tot > bit.e_tot \
                else math.nan
            report.append((f"m={m} L={L}", f"e_tot {_fmt_value(sol.e_tot)} groups "
                           f"{' '.join(map(str, sol.group_sizes))} savings_fraction "
                           f"{_fmt_value(savings)}"))
            rows += _energy_rows("levels", fmt, sol.ev, L, params)
            bars[f"L={L}"] = (fmt.positions, sol.ev.energies)
        bars["bitwise"] = (fmt.positions, bit.ev.energies)
        curve = ("number of levels L", Ls, totals)
    report.append(("feasible", str(int(any_ok))))
    return any_ok, rows, report, (bars, curve)


def _write(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memkalman",
        description="Quantized Kalman filter on energy-scalable unreliable memory.")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "theory-sweep": "predicted error covariance over an (m, e_tot) grid",
        "mc-sweep": "Monte Carlo error covariance next to the prediction",
        "optimize": "minimum-energy bank allocation under the error constraint",
        "validate-config": "parse the config and print the resolved settings",
    }
    for verb, text in helps.items():
        p = sub.add_parser(verb, help=text, description=text)
        p.add_argument("--config", required=True, type=Path, help="config file")
        p.add_argument("--out", type=Path, help="output CSV path (default: stdout)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--trials", type=int, help="override the Monte Carlo trial count")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--no-figure", action="store_true", help="skip the PNG figure")
        p.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed, trials=args.trials, threads=args.threads)
        if args.verb == "validate-config":
            _write("".join(f"{k} = {v}\n" for k, v in cfg.resolved()), args.out)
            return EXIT_OK
        figure = args.out is not None and not args.no_figure
        if args.verb in ("theory-sweep", "mc-sweep"):
            cols, rows = theory_rows(cfg) if args.verb == "theory-sweep" else mc_rows(cfg)
            _write(render_csv(cfg, cols, rows), args.out)
            if figure:
                from .plotting import plot_sweep
                plot_sweep(rows, args.out.with_suffix(".png"), cfg.model.c,
                           with_mc=args.verb == "mc-sweep")
            return EXIT_OK
        feasible, rows, report, (bars, curve) = optimize_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    _write(render_csv(cfg, ENERGY_COLUMNS, rows), args.out)
    text = "".join(f"{k}: {v}\n" for k, v in report)
    if args.out is not None:
        args.out.with_suffix(".report.txt").write_text(text)
    sys.stderr.write(text)
    if figure and bars:
        from .plotting import plot_allocation
        plot_allocation(bars, args.out.with_suffix(".png"), curve)
    if not feasible:
        print("optimization infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK
