"""Figures written next to their delimited data: profile projection, attention, loss curve."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import StructureError  # noqa: E402


def pca_projection(vectors, n_components=2):
    """Projection onto the leading principal components (deterministic sign: largest |loading| positive)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise StructureError("projection needs a non-empty 2-D matrix")
    centred = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:n_components]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    coords = centred @ comps.T
    if coords.shape[1] < n_components:
        coords = np.pad(coords, ((0, 0), (0, n_components - coords.shape[1])))
    return coords


def plot_profiles(profiles, csv_path, png_path):
    """2-D PCA of treatment profiles coloured by MOA. Writes the coordinates and the figure."""
    coords = pca_projection([p.vector for p in profiles])
    csv_path, png_path = Path(csv_path), Path(png_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["treatment", "moa", "pc1", "pc2"])
        for p, (a, b) in zip(profiles, coords):
            w.writerow([p.treatment, p.moa or "", f"{a:.9g}", f"{b:.9g}"])

    moas = sorted({p.moa or "" for p in profiles})
    cmap = plt.get_cmap("tab20", max(len(moas), 1))
    fig, ax = plt.subplots(figsize=(6, 5))
    for k, moa in enumerate(moas):
        idx = [i for i, p in enumerate(profiles) if (p.moa or "") == moa]
        ax.scatter(coords[idx, 0], coords[idx, 1], s=18, color=cmap(k), label=moa or "(none)")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("Treatment profiles")
    if len(moas) <= 20:
        ax.legend(fontsize=7, loc="best", frameon=False)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return coords


def plot_attention(image, attn, png_path):
    """Input crop next to the head-averaged class-token attention and each head."""
    heads = attn.weights
    n = heads.shape[0] + 2
    fig, axes = plt.subplots(1, n, figsize=(2 * n, 2.2))
    axes[0].imshow(image, cmap="gray")
    axes[0].set_title("input", fontsize=8)
    axes[1].imshow(attn.mean_map(), cmap="inferno")
    axes[1].set_title("mean", fontsize=8)
    for h in range(heads.shape[0]):
        axes[h + 2].imshow(heads[h], cmap="inferno")
        axes[h + 2].set_title(f"head {h}", fontsize=8)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_training_curves(logs: dict, png_path):
    """``logs`` maps a label to (global steps, losses)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (steps, losses) in sorted(logs.items()):
        ax.plot(steps, losses, lw=1, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
