"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (9.0, 3.6),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no Software/date metadata, so reruns give identical files
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(runs: Sequence[dict], path: str | Path) -> Path:
    """Per-epoch train loss and forward NFE, averaged over seeds for each model.

    ``runs`` are run-report dicts with an ``epochs`` list.
    """
    by_model: dict[str, list[dict]] = {}
    for r in runs:
        by_model.setdefault(r["model"], []).append(r)
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_nfe) = plt.subplots(1, 2)
        for model in sorted(by_model):
            group = by_model[model]
            n = min(len(r["epochs"]) for r in group)
            if n == 0:
                continue
            epochs = np.arange(1, n + 1)
            loss = np.array([[e["loss"] for e in r["epochs"][:n]] for r in group])
            nfe = np.array([[e["forward_nfe"] for e in r["epochs"][:n]] for r in group])
            ax_loss.semilogy(epochs, np.maximum(loss.mean(axis=0), 1e-12), label=model)
            ax_nfe.plot(epochs, nfe.mean(axis=0), label=model)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        ax_nfe.set_xlabel("epoch")
        ax_nfe.set_ylabel("forward NFE per epoch")
        ax_loss.legend()
        return _save(fig, Path(path))


def state_trajectories(rows: Sequence[tuple[int, int, float, np.ndarray]], path: str | Path) -> Path:
    """Squared amplitudes |psi_1|^2, |psi_2|^2 along the solve for a few samples.

    ``rows`` holds ``(sample_id, label, t, z)`` tuples.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, sharex=True)
        samples = sorted({(r[0], r[1]) for r in rows})
        for sid, label in samples:
            pts = [(t, z) for s, _, t, z in rows if s == sid]
            t = np.array([p[0] for p in pts])
            z = np.array([p[1] for p in pts])
            for k, ax in enumerate(axes):
                ax.plot(t, z[:, 2 * k] ** 2 + z[:, 2 * k + 1] ** 2, label=f"sample {sid} (class {label})")
        for k, ax in enumerate(axes):
            ax.set_xlabel("t")
            ax.set_ylabel(f"|psi_{k + 1}|^2")
        axes[0].legend()
        return _save(fig, Path(path))
