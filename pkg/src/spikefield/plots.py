"""Headless figure rendering for the reporting commands.

Every function writes a PNG next to the delimited output it illustrates and
returns the path it wrote. matplotlib runs on the Agg backend so the CLI works
without a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_metrics(history, out_path) -> Path:
    """Training loss curve with evaluation psnr points on a twin axis.

    history rows are (iteration, loss, psnr_or_None) as written to metrics.csv.
    """
    out_path = Path(out_path)
    its = [row[0] for row in history]
    losses = [row[1] for row in history]
    evals = [(row[0], row[2]) for row in history if row[2] is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(its, losses, color="tab:blue", lw=1.0, label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss", color="tab:blue")
    ax.set_yscale("log")
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), color="tab:red", marker="o", ms=4, lw=1.0, label="psnr")
        ax2.set_ylabel("psnr [dB]", color="tab:red")
    ax.set_title("training progress")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_pack_density(rows, out_path) -> Path:
    """Occupancy density per chunk for each packing mode.

    rows are dicts with keys chunk, mode, rays, t_len, valid_slots, total_slots,
    density (the pack-bench csv rows).
    """
    out_path = Path(out_path)
    modes = sorted({row["mode"] for row in rows})
    chunks = sorted({row["chunk"] for row in rows})
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, mode in enumerate(modes):
        dens = [next(r["density"] for r in rows if r["mode"] == mode and r["chunk"] == c)
                for c in chunks]
        ax.bar(np.arange(len(chunks)) + i * width, dens, width, label=mode)
    ax.set_xticks(np.arange(len(chunks)) + width * (len(modes) - 1) / 2)
    ax.set_xticklabels([str(c) for c in chunks])
    ax.set_xlabel("chunk")
    ax.set_ylabel("occupied slot fraction")
    ax.set_ylim(0, 1.05)
    if modes:
        ax.legend()
    ax.set_title("packing density")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_energy(report_dict: dict, out_path) -> Path:
    """Estimated energy of the spiking path against the dense baseline."""
    out_path = Path(out_path)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    snn = report_dict["snn"]["energy_pj"]
    ann = report_dict["ann"]["energy_pj"]
    ax.bar(["spiking", "dense"], [snn, ann], color=["tab:green", "tab:gray"])
    ax.set_ylabel("energy [pJ]")
    # ratio is None when the dense baseline counted zero operations
    ratio = report_dict["ratio"]
    ax.set_title("total" if ratio is None else f"total (ratio {ratio:.3f})")
    layers = report_dict["snn"]["layers"]
    names = [l["name"] for l in layers]
    macs = [l["macs"] for l in layers]
    acs = [l["synapse_acs"] + l["bias_acs"] for l in layers]
    x = np.arange(len(names))
    ax2.bar(x - 0.2, macs, 0.4, label="MAC")
    ax2.bar(x + 0.2, acs, 0.4, label="AC")
    ax2.set_xticks(x)
    ax2.set_xticklabels(names)
    ax2.set_ylabel("operations")
    ax2.legend()
    ax2.set_title("per layer")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_eval_pairs(pairs, out_path) -> Path:
    """Rendered / reference image pairs side by side, one row per view.

    pairs is a list of (name, rendered [H,W,3], reference [H,W,3], psnr).
    """
    out_path = Path(out_path)
    n = len(pairs)
    fig, axes = plt.subplots(n, 2, figsize=(6, 3 * n), squeeze=False)
    for row, (name, rendered, reference, value) in enumerate(pairs):
        axes[row][0].imshow(np.clip(rendered, 0, 1))
        axes[row][0].set_title(f"{name} rendered ({value:.2f} dB)")
        axes[row][1].imshow(np.clip(reference, 0, 1))
        axes[row][1].set_title(f"{name} reference")
        for ax in axes[row]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
