"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dist import UtilityProfile  # noqa: E402
from .geometry import support_values  # noqa: E402


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(params: Sequence[float], gaps: Sequence[float], slope: float, intercept: float,
               path: str | Path, xlabel: str = "1 - gamma") -> Path:
    """Log-log plot of gaps with the fitted power law."""
    x = np.asarray(params, dtype=float)
    y = np.asarray(gaps, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(x, y, "o", label="exact region gap")
    xs = np.geomspace(x.min(), x.max(), 100)
    ax.loglog(xs, np.exp(intercept) * xs ** slope, "-", label=f"fit, slope {slope:.3f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("gap")
    ax.legend()
    return _finish(fig, path)


def plot_region(profile: UtilityProfile, center, radius: float, path: str | Path,
                margin: float = 0.0, points: int = 721) -> Path:
    """Boundary of U* with the region ball and its table ball (two agents)."""
    if profile.n != 2:
        raise ValueError("region plots need two agents")
    theta = np.linspace(0.0, np.pi / 2, points)
    B = np.column_stack([np.cos(theta), np.sin(theta)])
    h = support_values(profile, B)
    hull = []
    for k in range(points - 1):
        M = np.array([B[k], B[k + 1]])
        try:
            hull.append(np.linalg.solve(M, h[k:k + 2]))
        except np.linalg.LinAlgError:
            continue
    hull = np.array(hull)
    E = profile.means
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(hull[:, 0], hull[:, 1], "k-", lw=1, label="U* frontier")
    ax.plot([E[0], 0], [0, E[1]], "k--", lw=1, label="no-information")
    t = np.linspace(0, 2 * np.pi, 200)
    c = np.asarray(center, dtype=float)
    ax.plot(c[0] + radius * np.cos(t), c[1] + radius * np.sin(t), "b-", label="region ball")
    if margin > 0:
        R = radius + margin
        ax.plot(c[0] + R * np.cos(t), c[1] + R * np.sin(t), "b:", label="table ball")
    ax.set_aspect("equal")
    ax.set_xlim(left=0)
    ax.set_ylim(bottom=0)
    ax.set_xlabel("U_0")
    ax.set_ylabel("U_1")
    ax.legend(loc="upper right", fontsize=8)
    return _finish(fig, path)


def plot_totals(totals: np.ndarray, target: Sequence[float], path: str | Path) -> Path:
    """Histograms of per-episode totals with the promised utility marked."""
    n = totals.shape[1]
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.5), squeeze=False)
    for i in range(n):
        ax = axes[0, i]
        ax.hist(totals[:, i], bins=40, color="0.6")
        ax.axvline(target[i], color="r", label="promised")
        ax.set_xlabel(f"agent {i} total")
        ax.legend(fontsize=8)
    return _finish(fig, path)


def plot_rate_functions(etas: Sequence[float], curves: dict[str, Sequence[float]], path: str | Path) -> Path:
    """Rate functions against eta on log axes (zeros are dropped)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    e = np.asarray(etas, dtype=float)
    for name, vals in curves.items():
        v = np.asarray(vals, dtype=float)
        keep = v > 0
        if np.any(keep):
            ax.loglog(e[keep], v[keep], label=name)
    ax.set_xlabel("eta")
    ax.set_ylabel("value")
    ax.legend(fontsize=8)
    return _finish(fig, path)
