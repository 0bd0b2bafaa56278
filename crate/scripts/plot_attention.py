#!/usr/bin/env python3
"""Draw an attention.tsv export as a grid of heatmaps, one per token.

usage: plot_attention.py attention.tsv [--layer L] [--head H] [--out attention.png]

Needs matplotlib and numpy.
"""
import argparse

import matplotlib.pyplot as plt
import numpy as np


def load(path):
    meta, rows, header = {}, [], None
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                parts = line[1:].strip().split("\t", 1)
                if len(parts) == 2:
                    meta[parts[0]] = parts[1]
                continue
            cols = line.split("\t")
            if header is None:
                header = cols
                continue
            rec = dict(zip(header, cols))
            v, r, c = int(rec["views"]), int(rec["rows"]), int(rec["cols"])
            rec["grid"] = np.array([float(x) for x in rec["values"].split()]).reshape(v, r, c)
            rows.append(rec)
    return meta, rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("path")
    ap.add_argument("--layer", type=int, default=None, help="default: last layer")
    ap.add_argument("--head", type=int, default=None, help="default: mean over heads")
    ap.add_argument("--out", default="attention.png")
    args = ap.parse_args()

    meta, rows = load(args.path)
    layer = args.layer if args.layer is not None else max(int(r["layer"]) for r in rows)
    rows = [r for r in rows if int(r["layer"]) == layer]
    if args.head is not None:
        rows = [r for r in rows if int(r["head"]) == args.head]

    by_pos = {}
    for r in rows:
        by_pos.setdefault(int(r["position"]), []).append(r)
    positions = sorted(by_pos)
    views = rows[0]["grid"].shape[0]

    fig, axes = plt.subplots(views, len(positions), figsize=(1.6 * len(positions), 1.8 * views), squeeze=False)
    for j, pos in enumerate(positions):
        grid = np.mean([r["grid"] for r in by_pos[pos]], axis=0)
        for v in range(views):
            ax = axes[v][j]
            ax.imshow(grid[v], cmap="magma", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if v == 0:
                ax.set_title(by_pos[pos][0]["word"], fontsize=9)
    fig.suptitle(f"{meta.get('study', '')} layer {layer}", fontsize=10)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
