"""Deterministic CSV/JSON writers and SVG figures for experiment outputs."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .harness import LOG_COLUMNS, TrialRecord

TABLE1_COLUMNS = ("cell", "trials", "reach", "deadlock", "collision", "d_coverage", "alpha_coverage", "auroc")
TABLE2_COLUMNS = ("cell", "gamma_multiplier", "gamma", "phi_d", "phi_alpha", "n_filtered",
                  "reach", "deadlock", "collision", "d_coverage", "alpha_coverage", "status")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _clean(obj):
    # JSON has no NaN/inf; keep summaries strictly parseable
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_trial_csv(record: TrialRecord, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for i in range(record.n_steps):
            w.writerow(["%.17g" % record.log[c][i] for c in LOG_COLUMNS])


def read_trial_csv(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {c: np.atleast_1d(data[c]) for c in LOG_COLUMNS}


def write_table1(cells: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TABLE1_COLUMNS)
        for c in cells:
            w.writerow([_fmt(c.get(k)) for k in TABLE1_COLUMNS])


def write_table2(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TABLE2_COLUMNS)
        for r in rows:
            phi = r.get("phi_cal") or [None, None]
            vals = dict(r, phi_d=phi[0], phi_alpha=phi[1])
            w.writerow([_fmt(vals.get(k)) for k in TABLE2_COLUMNS])


def write_cell_logs(cell: str, records: list[TrialRecord], out) -> list[str]:
    d = Path(out) / "trials" / cell.replace(":", "__")
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for rec in records:
        name = f"trial_{rec.spec.index:04d}.csv"
        write_trial_csv(rec, d / name)
        names.append(name)
    outcomes = {f"trial_{r.spec.index:04d}": r.outcome for r in records}
    write_json(outcomes, d / "outcomes.json")
    return names


# --- figures -------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "atomcbf"
    return plt


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def _obstacle_artist(ax, spec):
    obs = spec.obstacle
    if obs.shape == "circle":
        t = np.linspace(0, 2 * math.pi, 200)
        ax.fill(obs.center[0] + obs.size * np.cos(t), obs.center[1] + obs.size * np.sin(t), color="0.6")
    else:
        v = obs.vertices()
        ax.fill(v[:, 0], v[:, 1], color="0.6")
    t = np.linspace(0, 2 * math.pi, 200)
    for rad, style in ((spec.r, "k--"), (spec.r_cbf, "k:")):
        ax.plot(obs.center[0] + rad * np.cos(t), obs.center[1] + rad * np.sin(t), style, lw=0.8)


def plot_trials(records: dict, artifacts: dict, path, title: str = "") -> None:
    """Three panels: trajectories, alpha with prediction band, h(x) vs h(x_hat).

    ``records`` maps a label (the filter) to one TrialRecord; all should share an episode.
    """
    from .harness import EUQ_OF

    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    colors = {"cbf_qp": "tab:red", "mr_cbf": "tab:orange", "atom_scod": "tab:green", "atom_deep": "tab:purple"}
    first = next(iter(records.values()))
    _obstacle_artist(axes[0], first.spec)
    axes[0].plot(*first.spec.goal, "b*", ms=10)
    for label, rec in records.items():
        kind = rec.spec.filter_kind
        col = colors.get(kind, "k")
        log = rec.log
        axes[0].plot(log["x"], log["y"], color=col, label=f"{label} ({rec.outcome})")
        m = rec.engaged()
        axes[1].plot(log["t"][m], log["alpha_hat"][m], color=col, lw=0.8)
        euq = EUQ_OF.get(kind)
        if euq and m.any():
            half = artifacts[euq].phi_cal[1] * log["unc"][m]
            axes[1].fill_between(log["t"][m], log["alpha_hat"][m] - half, log["alpha_hat"][m] + half,
                                 color=col, alpha=0.2, lw=0)
        axes[2].plot(log["t"][m], log["h_hat"][m], color=col, lw=0.8, ls="--")
        axes[2].plot(log["t"], log["h"], color=col, lw=0.8)
    axes[1].plot(first.log["t"], first.log["alpha"], color="tab:blue", lw=1.2, label="true alpha")
    axes[0].set_aspect("equal")
    axes[0].legend(fontsize=7)
    axes[0].set_title("trajectory")
    axes[1].set_title("alpha (line: estimate, band: interval)")
    axes[1].set_xlabel("t [s]")
    axes[2].axhline(0.0, color="k", lw=0.5)
    axes[2].set_title("h(x) solid, h(x_hat) dashed")
    axes[2].set_xlabel("t [s]")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_scores(cal_scores, ood_scores, path, title: str = "") -> None:
    """Histogram of calibration (ID) scores against OoD trajectory scores, log x axis."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    both = np.concatenate([cal_scores, ood_scores])
    pos = both[both > 0]
    lo, hi = (pos.min(), pos.max()) if pos.size else (1e-6, 1.0)
    bins = np.logspace(math.log10(lo), math.log10(hi) + 1e-9, 40)
    ax.hist(np.clip(cal_scores, lo, None), bins=bins, alpha=0.6, label="ID calibration", density=True)
    ax.hist(np.clip(ood_scores, lo, None), bins=bins, alpha=0.6, label="OoD trajectories", density=True)
    ax.set_xscale("log")
    ax.set_xlabel("Unc")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


