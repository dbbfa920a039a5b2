"""Benchmark CSV rendering: message-count, work, and timing figures.

Reads the CSV emitted by `hesearch bench` and writes PNG figures next to
it (or into --out-dir). The message plot overlays the measured counts on
the closed-form 1 + 2*log2(n_padded) curve so a regression is visible at
a glance; the work plot does the same against n_padded - 1.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict


def load_bench_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"no benchmark rows in {path}")
    return rows


def _group_means(rows: list[dict], key: str) -> tuple[list[int], list[float]]:
    acc: dict[int, list[float]] = defaultdict(list)
    for row in rows:
        acc[int(row["n_padded"])].append(float(row[key]))
    ns = sorted(acc)
    return ns, [sum(acc[n]) / len(acc[n]) for n in ns]


def render_bench_figures(csv_path: str, out_dir: str | None = None) -> list[str]:
    """Render the three standard figures; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = load_bench_csv(csv_path)
    out_dir = out_dir or os.path.dirname(os.path.abspath(csv_path))
    stem = os.path.splitext(os.path.basename(csv_path))[0]
    backends = sorted({row["backend"] for row in rows})
    written = []

    def save(fig, suffix: str) -> None:
        path = os.path.join(out_dir, f"{stem}_{suffix}.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    # messages vs n_padded, with the closed form overlaid
    fig, ax = plt.subplots(figsize=(6, 4))
    ns_all = sorted({int(r["n_padded"]) for r in rows})
    formula = [1 + 2 * int(math.log2(n)) for n in ns_all]
    ax.plot(ns_all, formula, "k--", label="1 + 2 log2(n)")
    for be in backends:
        sub = [r for r in rows if r["backend"] == be]
        ns, paper = _group_means(sub, "messages_paper")
        _, wire = _group_means(sub, "messages_wire")
        ax.plot(ns, paper, "o", label=f"{be}: protocol")
        ax.plot(ns, wire, "^", mfc="none", label=f"{be}: wire (+request)")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("padded dataset size")
    ax.set_ylabel("messages per search")
    ax.legend()
    ax.grid(alpha=0.3)
    save(fig, "messages")

    # homomorphic multiplications vs n_padded
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns_all, [n - 1 for n in ns_all], "k--", label="n - 1")
    for be in backends:
        sub = [r for r in rows if r["backend"] == be]
        ns, muls = _group_means(sub, "hmul_count")
        ax.plot(ns, muls, "o", label=f"{be}: measured")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("padded dataset size")
    ax.set_ylabel("multiplications per build")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    save(fig, "work")

    # timings
    fig, ax = plt.subplots(figsize=(6, 4))
    for be in backends:
        sub = [r for r in rows if r["backend"] == be]
        ns, build = _group_means(sub, "build_ms")
        _, search = _group_means(sub, "search_ms")
        ax.plot(ns, build, "o-", label=f"{be}: build")
        ax.plot(ns, search, "s--", label=f"{be}: search")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("padded dataset size")
    ax.set_ylabel("milliseconds")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    save(fig, "timing")

    return written
