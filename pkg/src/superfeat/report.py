"""Rendering of diagnostics: CSV tables with matplotlib figures beside them.

Every report function writes delimited output and, where a figure makes
sense, a PNG next to it.  Figures are presentation only; the CSVs carry the
numbers that tests and downstream tooling consume.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .errors import IdOutOfRange  # noqa: E402

log = logging.getLogger(__name__)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def save_correlation_figure(matrix: np.ndarray, path):
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("feature id")
    ax.set_ylabel("feature id")
    ax.set_title("Attention map correlation")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_redundancy_figure(ks, curves: dict, path):
    """curves maps a label to a per-K mean similarity array."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, values in curves.items():
        ax.plot(ks, values, marker="o", label=label)
    ax.set_xlabel("K")
    ax.set_ylabel("avg similarity to K nearest")
    ax.set_ylim(bottom=0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_memory_sweep_figure(rows, path):
    """rows: (budget, avg_clusters, map) triples from a budget sweep."""
    rows = sorted(rows, key=lambda r: r[1])
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot([r[1] for r in rows], [r[2] for r in rows], marker="o")
    for budget, clusters, score in rows:
        ax.annotate(str(budget), (clusters, score), textcoords="offset points",
                    xytext=(4, -10), fontsize=8)
    ax.set_xlabel("average non-empty clusters per image")
    ax.set_ylabel("mAP")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_per_scale_figure(stats, path):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    ticks = [str(s) for s in stats.scales]
    panels = [
        ("share of selected (%)", stats.selected_share),
        ("retention per scale (%)", stats.retention_rate),
        ("candidates per scale", stats.candidate_counts),
    ]
    for ax, (title, values) in zip(axes, panels):
        ax.bar(range(len(ticks)), values)
        ax.set_xticks(range(len(ticks)), ticks, rotation=45)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _rank(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(values.size)
    return ranks


def rank_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman correlation between two flattened maps."""
    ra, rb = _rank(a.ravel()), _rank(b.ravel())
    return float(np.corrcoef(ra, rb)[0, 1])


def _resample_to(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(grid)[None, None].double()
    out = torch.nn.functional.interpolate(t, size=shape, mode="bilinear",
                                          align_corners=False)
    return out[0, 0].numpy()


def export_attention_heatmaps(image, per_scale_sets, ids, out_dir,
                              colormap: str = "viridis"):
    """Write one color-mapped attention heatmap PNG per (feature ID, scale).

    Each attention column is reshaped to its grid, bilinearly upsampled to
    the image size, and overlaid next to the image.  A CSV reports the
    cross-scale rank correlation of each ID's maps on a common grid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    maps: dict[int, list[tuple[float, np.ndarray]]] = {}
    for sfs in per_scale_sets:
        alpha = sfs.attention.detach().cpu().double().numpy()
        length, n = alpha.shape
        if sfs.spatial_shape is None:
            raise ValueError("feature set lacks a spatial shape for heatmaps")
        w, h = sfs.spatial_shape
        for fid in ids:
            if not 0 <= fid < n:
                raise IdOutOfRange(f"feature id {fid} outside [0, {n})")
            grid = alpha[:, fid].reshape(h, w)
            maps.setdefault(fid, []).append((sfs.scale, grid))
            upsampled = _resample_to(grid, image.pixels.shape[:2])
            fig, axes = plt.subplots(1, 2, figsize=(6, 3))
            axes[0].imshow(image.pixels)
            axes[0].set_title(image.id, fontsize=8)
            axes[1].imshow(upsampled, cmap=colormap)
            axes[1].set_title(f"id {fid} @ scale {sfs.scale}", fontsize=8)
            for ax in axes:
                ax.axis("off")
            fig.tight_layout()
            path = out_dir / f"attn_{image.id}_id{fid:03d}_s{sfs.scale}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            paths.append(path)
    rows = []
    for fid, entries in maps.items():
        entries.sort(key=lambda e: -e[0])
        coarse_shape = entries[-1][1].shape
        for scale, grid in entries[:-1]:
            resampled = _resample_to(grid, coarse_shape)
            rows.append((fid, scale, entries[-1][0],
                         rank_correlation(resampled, entries[-1][1])))
    csv_path = out_dir / "scale_consistency.csv"
    write_csv(csv_path, ["feature_id", "scale", "reference_scale",
                         "rank_correlation"], rows)
    return paths, csv_path
