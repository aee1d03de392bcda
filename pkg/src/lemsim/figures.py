"""Render report figures from a written result bundle.

Reads the delimited files back (so figures can be regenerated without
re-running) and saves PNGs next to them.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, metadata={"Software": "lemsim"})
    plt.close(fig)
    return path


def render_voltage_profiles(bundle_dir: str, out_dir: str) -> str:
    _, rows = _read_csv(os.path.join(bundle_dir, "voltages.csv"))
    by_t_lem = defaultdict(list)
    by_t_nolem = defaultdict(list)
    for node, ph, t, v_lem, v_nolem in rows:
        by_t_lem[int(t)].append(float(v_lem))
        if v_nolem != "nan":
            by_t_nolem[int(t)].append(float(v_nolem))
    ts = sorted(by_t_lem)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(ts, [sum(by_t_lem[t]) / len(by_t_lem[t]) for t in ts], "o-", label="with LEM")
    if by_t_nolem:
        ax.plot(
            ts,
            [sum(by_t_nolem[t]) / len(by_t_nolem[t]) for t in ts],
            "s--",
            label="without LEM",
        )
    ax.axhline(1.0, color="k", lw=0.8, alpha=0.5)
    ax.axhspan(0.95, 1.05, color="green", alpha=0.08, label="ANSI band")
    ax.set_xlabel("time [min]")
    ax.set_ylabel("mean |V| [p.u.]")
    ax.set_title("Nodal voltage magnitudes, spatial mean")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir, "voltage_profiles.png")


def render_dlmp_components(bundle_dir: str, out_dir: str) -> str:
    _, rows = _read_csv(os.path.join(bundle_dir, "dlmp.csv"))
    acc = defaultdict(lambda: ([], [], []))
    for node, ph, t, lp, lq, lv, leq in rows:
        a = acc[int(t)]
        a[0].append(float(lp))
        a[1].append(float(lq))
        a[2].append(float(lv))
    ts = sorted(acc)
    mean = lambda xs: sum(xs) / len(xs)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(ts, [mean(acc[t][0]) for t in ts], "o-", label=r"$\lambda_P$")
    ax.plot(ts, [mean(acc[t][1]) for t in ts], "s-", label=r"$\lambda_Q$")
    ax.plot(ts, [mean(acc[t][2]) for t in ts], "^-", label=r"$\bar{\lambda}_V$")
    ax.set_xlabel("time [min]")
    ax.set_ylabel("price [$/kWh]")
    ax.set_title("dLMP components, network mean")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir, "dlmp_components.png")


def render_dlmp_nodes(bundle_dir: str, out_dir: str) -> str:
    _, rows = _read_csv(os.path.join(bundle_dir, "dlmp.csv"))
    acc = defaultdict(lambda: ([], [], []))
    for node, ph, t, lp, lq, lv, leq in rows:
        a = acc[node]
        a[0].append(float(lp))
        a[1].append(float(lq))
        a[2].append(float(lv))
    nodes = sorted(acc)
    mean = lambda xs: sum(xs) / len(xs)
    xs = range(len(nodes))
    width = 0.28
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([x - width for x in xs], [mean(acc[n][0]) for n in nodes], width, label=r"$\lambda_P$")
    ax.bar(list(xs), [mean(acc[n][1]) for n in nodes], width, label=r"$\lambda_Q$")
    ax.bar([x + width for x in xs], [mean(acc[n][2]) for n in nodes], width, label=r"$\bar{\lambda}_V$")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(nodes, rotation=30, ha="right")
    ax.set_ylabel("time-mean price [$/kWh]")
    ax.set_title("dLMP decomposition per node")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir, "dlmp_nodes.png")


def render_tariffs(bundle_dir: str, out_dir: str) -> str:
    _, rows = _read_csv(os.path.join(bundle_dir, "tariffs.csv"))
    series = defaultdict(lambda: ([], []))
    for smo, dca, t, mu_p, mu_q, cash in rows:
        ts, vals = series[dca]
        ts.append(int(t))
        vals.append(float(mu_p))
    fig, ax = plt.subplots(figsize=(7, 4))
    for dca in sorted(series):
        ts, vals = series[dca]
        ax.step(ts, vals, where="post", label=dca, alpha=0.8)
    ax.set_xlabel("time [min]")
    ax.set_ylabel(r"$\mu^P$ [$/kWh]")
    ax.set_title("Retail P tariffs per DCA")
    if len(series) <= 12:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, out_dir, "tariffs.png")


def render_gaps(bundle_dir: str, out_dir: str) -> str:
    _, rows = _read_csv(os.path.join(bundle_dir, "gaps.csv"))
    ts = [int(r[0]) for r in rows]
    gaps = [max(float(r[1]), float(r[2])) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    floor = 1e-16
    ax.semilogy(ts, [max(g, floor) for g in gaps], "o-")
    ax.set_xlabel("time [min]")
    ax.set_ylabel("max bilinear violation [p.u.]")
    ax.set_title("Relaxation gap per PM clearing")
    fig.tight_layout()
    return _save(fig, out_dir, "gaps.png")


def render_figures(bundle_dir: str, out_dir: str | None = None) -> list[str]:
    """Render every report figure from a bundle directory."""
    out_dir = out_dir or bundle_dir
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        render_voltage_profiles(bundle_dir, out_dir),
        render_dlmp_components(bundle_dir, out_dir),
        render_dlmp_nodes(bundle_dir, out_dir),
        render_gaps(bundle_dir, out_dir),
    ]
    if os.path.exists(os.path.join(bundle_dir, "tariffs.csv")):
        paths.append(render_tariffs(bundle_dir, out_dir))
    return paths
