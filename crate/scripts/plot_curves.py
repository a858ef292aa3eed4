#!/usr/bin/env python3
"""Render the TSV curve files a training run writes under OUT/curves/.

Usage:
    python3 scripts/plot_curves.py OUT_DIR [--save PREFIX]

Reads loss.tsv, churn.tsv, and recall.tsv from OUT_DIR/curves and draws
them with matplotlib if it is installed; without matplotlib it prints a
compact text rendering instead, so the script is usable in a bare
environment.
"""

import argparse
import csv
import sys
from pathlib import Path


def read_tsv(path: Path):
    if not path.is_file():
        return None, []
    with path.open() as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows:
        return None, []
    header, body = rows[0], rows[1:]
    series = {name: [] for name in header[1:]}
    epochs = []
    for row in body:
        epochs.append(float(row[0]))
        for name, cell in zip(header[1:], row[1:]):
            series[name].append(float(cell) if cell != "-" else None)
    return epochs, series


def text_plot(title: str, epochs, series):
    print(f"\n== {title} ==")
    if not epochs:
        print("  (no data)")
        return
    for name, values in series.items():
        present = [v for v in values if v is not None]
        if not present:
            continue
        lo, hi = min(present), max(present)
        span = (hi - lo) or 1.0
        bars = "".join(
            " " if v is None else "▁▂▃▄▅▆▇█"[min(7, int((v - lo) / span * 8))]
            for v in values
        )
        print(f"  {name:>12} [{lo:10.4g} … {hi:10.4g}] {bars}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", type=Path, help="training output directory")
    ap.add_argument("--save", metavar="PREFIX", help="write PNGs instead of showing")
    args = ap.parse_args()

    curves = args.out_dir / "curves"
    if not curves.is_dir():
        sys.exit(f"no curves directory under {args.out_dir}")

    panels = [
        ("loss", *read_tsv(curves / "loss.tsv")),
        ("churn", *read_tsv(curves / "churn.tsv")),
        ("recall", *read_tsv(curves / "recall.tsv")),
    ]

    try:
        import matplotlib

        if args.save:
            matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        for title, epochs, series in panels:
            text_plot(title, epochs, series)
        return

    drawn = [(t, e, s) for t, e, s in panels if e]
    fig, axes = plt.subplots(1, len(drawn), figsize=(5 * len(drawn), 4))
    if len(drawn) == 1:
        axes = [axes]
    for ax, (title, epochs, series) in zip(axes, drawn):
        for name, values in series.items():
            pts = [(e, v) for e, v in zip(epochs, values) if v is not None]
            if pts:
                ax.plot(*zip(*pts), label=name)
        ax.set_title(title)
        ax.set_xlabel("epoch")
        if title == "loss":
            ax.set_yscale("log")
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    if args.save:
        path = f"{args.save}_curves.png"
        fig.savefig(path, dpi=120)
        print(f"wrote {path}")
    else:
        plt.show()


if __name__ == "__main__":
    main()
