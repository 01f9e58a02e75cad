"""Matplotlib rendering of report artifacts to image files.

Every figure here is drawn from the same arrays the CSV emitters write, so
plots and delimited outputs always agree.
"""

import math

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_reward_histograms(samples, path, labels=None, bins=40):
    """Grid of per-dimension reward histograms with the mean marked."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    dim = samples.shape[1]
    cols = math.ceil(math.sqrt(dim))
    rows = math.ceil(dim / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows),
                             squeeze=False)
    for d in range(dim):
        ax = axes[d // cols][d % cols]
        ax.hist(samples[:, d], bins=bins, color="steelblue")
        ax.axvline(samples[:, d].mean(), color="red", linewidth=1.2)
        ax.set_title(labels[d] if labels else f"dim {d}", fontsize=9)
    for d in range(dim, rows * cols):
        axes[d // cols][d % cols].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pairwise_histograms(samples, path, bins=40):
    """Lower-triangle grid of pairwise 2-D reward histograms."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    dim = samples.shape[1]
    fig, axes = plt.subplots(dim, dim, figsize=(1.8 * dim, 1.8 * dim),
                             squeeze=False)
    for i in range(dim):
        for j in range(dim):
            ax = axes[i][j]
            if j < i:
                ax.hist2d(samples[:, j], samples[:, i], bins=bins,
                          cmap="viridis")
            elif i == j:
                ax.hist(samples[:, i], bins=bins, color="steelblue")
            else:
                ax.axis("off")
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_trace(chains, path, max_dims=6):
    """Sample traces per chain for the first few dimensions."""
    chains = [np.atleast_2d(np.asarray(c, dtype=float)) for c in chains]
    dim = min(chains[0].shape[1], max_dims)
    fig, axes = plt.subplots(dim, 1, figsize=(7, 1.6 * dim), squeeze=False)
    for d in range(dim):
        ax = axes[d][0]
        for c in chains:
            ax.plot(c[:, d], linewidth=0.6)
        ax.set_ylabel(f"dim {d}", fontsize=8)
    axes[-1][0].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_curve(x, means, stds, path, xlabel, ylabel):
    """Mean with a +-std band, as used for held-out metric trends."""
    x = np.asarray(x, dtype=float)
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(x, means, marker="o", color="steelblue")
    ax.fill_between(x, means - stds, means + stds, alpha=0.25,
                    color="steelblue")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
