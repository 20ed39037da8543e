"""Static figures written next to the CSV outputs (Agg backend, PNG)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["training_curves", "trajectories_top", "field_top", "delta_fit"]


def _draw_track(ax, track):
    for g in track.gates:
        a, b = g.corners[0], g.corners[1]
        ax.plot([a[0], b[0]], [a[1], b[1]], color="tab:orange", lw=3)
    for ob in track.obstacles:
        ax.add_patch(plt.Circle(ob.center[:2], ob.radius, color="0.6", alpha=0.7))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(rows: Sequence[dict], path) -> Path:
    it = np.array([r["iter"] for r in rows])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for key in ("loss_total", "loss_C", "loss_p"):
        ax1.plot(it, [r[key] for r in rows], label=key)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ev = [r for r in rows if r.get("success_rate") is not None]
    if ev:
        e_it = [r["iter"] for r in ev]
        ax2.plot(e_it, [r["success_rate"] for r in ev], "o-", label="success rate")
        ax2.plot(e_it, [r["success_cross"] for r in ev], "s-", label="success cross")
        ax2.set_ylim(-0.05, 1.05)
        ax3 = ax2.twinx()
        ax3.plot(e_it, [r["v_max"] for r in ev], "^--", color="tab:red", label="v_max")
        ax3.set_ylabel("v_max [m/s]")
        ax2.legend(fontsize=8, loc="upper left")
    ax2.set_xlabel("iteration")
    return _save(fig, path)


def trajectories_top(track, traces: Sequence[np.ndarray], path, title: str = "") -> Path:
    """Top view of position traces over the track layout."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    _draw_track(ax, track)
    for p in traces:
        if len(p):
            ax.plot(p[:, 0], p[:, 1], lw=1)
            ax.plot(p[0, 0], p[0, 1], "k.", ms=4)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def field_top(grid: np.ndarray, path, z_level: float | None = None, track=None) -> Path:
    """Quiver of the in-plane field on the grid slice closest to ``z_level``."""
    grid = np.asarray(grid)
    zs = np.unique(grid[:, 2])
    z = zs[np.argmin(np.abs(zs - (np.median(zs) if z_level is None else z_level)))]
    sl = grid[grid[:, 2] == z]
    bx, by = sl[:, 3], sl[:, 4]
    mag = np.hypot(bx, by)
    safe = np.where(mag > 0, mag, 1.0)
    fig, ax = plt.subplots(figsize=(7, 5))
    q = ax.quiver(sl[:, 0], sl[:, 1], bx / safe, by / safe, np.log10(np.where(mag > 0, mag, np.nan)),
                  cmap="viridis", scale=40)
    fig.colorbar(q, ax=ax, label="log10 |B|")
    if track is not None:
        _draw_track(ax, track)
    ax.set_aspect("equal")
    ax.set_title(f"z = {z:.2f} m")
    return _save(fig, path)


def delta_fit(losses: Sequence[float], t: np.ndarray, v_ref: np.ndarray, v_nominal: np.ndarray,
              v_delta: np.ndarray, path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    ax1.semilogy(np.arange(len(losses)), np.maximum(losses, 1e-16))
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("fit loss")
    ax2.plot(t, v_ref[:, 0], "k", label="target")
    ax2.plot(t, v_nominal[:, 0], "--", label="nominal")
    ax2.plot(t, v_delta[:, 0], ":", label="nominal + delta")
    ax2.set_xlabel("t [s]")
    ax2.set_ylabel("v_x [m/s]")
    ax2.legend(fontsize=8)
    return _save(fig, path)
