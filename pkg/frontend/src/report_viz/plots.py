"""Loss-curve and routing-heatmap figures."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .frames import FrameError, MetricsFrame, RoutingFrame


def _as_labeled(metrics: str | Path | dict[str, str | Path]) -> dict[str, MetricsFrame]:
    if isinstance(metrics, (str, Path)):
        metrics = {"run": metrics}
    return {label: MetricsFrame.load(p) for label, p in metrics.items()}


def plot_loss(metrics: str | Path | dict[str, str | Path], out: str | Path) -> Path:
    """Training-loss panel plus a per-PL validation-loss grid.

    ``metrics`` is one CSV path or a {variant label: path} mapping; every
    series needs at least two points.
    """
    frames = _as_labeled(metrics)
    for label, frame in frames.items():
        steps, _ = frame.series("train", "")
        if len(steps) < 2:
            raise FrameError(f"{label}: need at least 2 training points, got {len(steps)}")

    val_pls = sorted({pl for f in frames.values() for pl in f.pls("dev") if pl})
    n_panels = 1 + len(val_pls)
    cols = min(3, n_panels)
    rows = math.ceil(n_panels / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 3.2 * rows), squeeze=False)
    flat = axes.reshape(-1)

    ax = flat[0]
    for label in sorted(frames):
        steps, losses = frames[label].series("train", "")
        ax.plot(steps, losses, label=label)
    ax.set_title("training loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)

    for i, pl in enumerate(val_pls, start=1):
        ax = flat[i]
        for label in sorted(frames):
            steps, losses = frames[label].series("dev", pl)
            if steps:
                ax.plot(steps, losses, label=label)
        ax.set_title(f"validation loss: {pl}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
    for j in range(n_panels, len(flat)):
        flat[j].axis("off")

    out = Path(out)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_routing_heatmap(
    routing: str | Path,
    out: str | Path,
    allocation: str | Path | None = None,
    n_experts: int | None = None,
) -> Path:
    """PL-by-expert heatmap per expert layer, fractions from the routing CSV.

    With an allocation JSON, per-language group boundaries and the shared
    experts are overlaid as vertical lines.
    """
    frame = RoutingFrame.load(routing)
    alloc = None
    if allocation is not None:
        alloc = json.loads(Path(allocation).read_text())
    if n_experts is None:
        if alloc is not None:
            n_experts = int(alloc["total_experts"])
        else:
            n_experts = max(r.expert for r in frame.rows) + 1

    layers = frame.layers()
    fig, axes = plt.subplots(1, len(layers), figsize=(0.35 * n_experts * len(layers) + 2, 3.2),
                             squeeze=False)
    for ax, layer in zip(axes[0], layers):
        pls, m = frame.matrix(layer, n_experts)
        im = ax.imshow(m, aspect="auto", cmap="viridis", vmin=0.0)
        ax.set_yticks(range(len(pls)), pls)
        ax.set_xticks(range(0, n_experts, max(1, n_experts // 8)))
        ax.set_xlabel("expert")
        ax.set_title(f"layer {layer}")
        if alloc is not None:
            for experts in alloc["per_pl"].values():
                ax.axvline(min(experts) - 0.5, color="w", lw=0.8)
            for e in alloc["shared"]:
                ax.axvline(e - 0.5, color="r", lw=0.8)
                ax.axvline(e + 0.5, color="r", lw=0.8)
        fig.colorbar(im, ax=ax, fraction=0.046)

    out = Path(out)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
