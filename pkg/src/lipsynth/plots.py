"""Matplotlib figure rendering for reports and spectrogram inspection."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_mel_figure(mel_frames, path, hop=200, sample_rate=16000,
                    title="melspectrogram"):
    frames = np.asarray(mel_frames)
    fig, ax = plt.subplots(figsize=(8, 3.2))
    extent = (0.0, frames.shape[0] * hop / sample_rate, 0, frames.shape[1])
    im = ax.imshow(frames.T, origin="lower", aspect="auto", extent=extent,
                   cmap="magma", interpolation="nearest")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mel band")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="log amplitude")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_figure(attention, path, title="attention alignment"):
    attn = np.asarray(attention)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(attn.T, origin="lower", aspect="auto", cmap="viridis",
                   interpolation="nearest")
    ax.set_xlabel("decoder step")
    ax.set_ylabel("memory frame")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(rows, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [r["epoch"] for r in rows]
    ax.plot(epochs, [r["train_loss"] for r in rows], label="train")
    ax.plot(epochs, [r["val_loss"] for r in rows], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["tf_ratio"] for r in rows], color="gray", ls="--",
             alpha=0.6, label="teacher forcing")
    ax2.set_ylabel("teacher-forcing ratio")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(reports, path):
    """Bar chart over named metric reports: [(label, MetricReport), ...]."""
    labels = [label for label, _ in reports]
    fields = ["stoi", "estoi", "mel_mse", "spectral_convergence"]
    fig, axes = plt.subplots(1, len(fields), figsize=(3 * len(fields), 3.2))
    for ax, f in zip(axes, fields):
        ax.bar(range(len(labels)), [getattr(r, f) for _, r in reports],
               color="steelblue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_title(f)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
