"""Figures written next to the CSV outputs.

Only file output is supported, through the non-interactive Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _metric_label(c: int) -> str:
    return "position error variance" if c <= 2 else "trace of error covariance"


def plot_sweep(rows: list[dict], path, c: int, with_mc: bool = False):
    """Error metric against total energy (one line per ``m``), or against ``m``.

    ``rows`` are the dictionaries written to the sweep CSV.
    """
    key = "var_0" if c <= 2 else "trace"
    ms = sorted({r["m"] for r in rows})
    energies = sorted({r["e_tot"] for r in rows})
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    if len(energies) > 1:
        for m in ms:
            sel = sorted((r for r in rows if r["m"] == m), key=lambda r: r["e_tot"])
            x = [r["e_tot"] for r in sel]
            line, = ax.plot(x, [r[f"theory_{key}"] for r in sel], label=f"m={m} theory")
            if with_mc:
                ax.errorbar(x, [r[f"mc_{key}"] for r in sel], yerr=[r[f"mc_{key}_se"] for r in sel],
                            fmt="o", color=line.get_color(), ms=4, label=f"m={m} simulation")
        ax.set_xlabel("total energy e_tot")
    else:
        sel = sorted(rows, key=lambda r: r["m"])
        x = [r["m"] for r in sel]
        ax.plot(x, [r[f"theory_{key}"] for r in sel], label="theory")
        if with_mc:
            ax.errorbar(x, [r[f"mc_{key}"] for r in sel], yerr=[r[f"mc_{key}_se"] for r in sel],
                        fmt="o", ms=4, label="simulation")
        ax.set_xlabel("fractional bits m")
    ax.set_yscale("log")
    ax.set_ylabel(_metric_label(c))
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def plot_allocation(energies: dict[str, tuple[np.ndarray, np.ndarray]], path,
                    curve: tuple[str, list, list] | None = None):
    """Per-bank energies of one or more allocations, plus an optional summary curve.

    Parameters
    ----------
    energies : dict
        ``label -> (bit positions, energies)``.
    path : path-like
    curve : tuple, optional
        ``(xlabel, x, e_tot)`` drawn in a second panel, e.g. total energy
        against ``m`` or against the number of levels.
    """
    ncols = 2 if curve else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6.4 * ncols, 4.4), squeeze=False)
    ax = axes[0, 0]
    width = 0.8 / max(1, len(energies))
    for i, (label, (bits, e)) in enumerate(energies.items()):
        ax.bar(np.asarray(bits) + (i - (len(energies) - 1) / 2) * width, e, width, label=label)
    ax.set_xlabel("bit position b")
    ax.set_ylabel("bank energy e_b")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    if curve:
        xlabel, x, y = curve
        ax2 = axes[0, 1]
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(y)
        ax2.plot(np.asarray(x)[ok], y[ok], "o-")
        ax2.set_xlabel(xlabel)
        ax2.set_ylabel("total energy e_tot")
        ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
