"""SVG figures of 2D marginals with overlaid trajectories."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cfm import TrajectorySet  # noqa: E402
from .data import MarginalDataset  # noqa: E402

MAX_DRAWN_TRAJECTORIES = 200


def plot_knot(data: MarginalDataset, traj: TrajectorySet | None, path, title: str = "") -> Path:
    """Scatter the marginals coloured by time and overlay trajectories.

    The SVG bytes depend only on the inputs: element ids are salted with a
    constant and no creation date is embedded.
    """
    if data.dim != 2:
        raise ValueError(f"plots need 2D data, got dimension {data.dim}")
    if traj is not None and traj.states.size and traj.states.shape[-1] != 2:
        raise ValueError("trajectories must be 2D")
    ts, pts = data.all_points()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "alicfm", "svg.fonttype": "none", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(6, 6))
        sc = ax.scatter(pts[:, 0], pts[:, 1], c=ts, s=4, cmap="viridis", vmin=0.0, vmax=1.0,
                        linewidths=0, rasterized=False)
        fig.colorbar(sc, ax=ax, label="t", fraction=0.046, pad=0.04)
        if traj is not None and traj.states.size:
            n = traj.states.shape[1]
            keep = np.arange(n)[~traj.divergent][:MAX_DRAWN_TRAJECTORIES]
            for j in keep:
                ax.plot(traj.states[:, j, 0], traj.states[:, j, 1], color="black", lw=0.6, alpha=0.6)
            ax.scatter(traj.states[0, keep, 0], traj.states[0, keep, 1], s=10, color="tab:red", zorder=3)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x_1")
        ax.set_ylabel("x_2")
        if title:
            ax.set_title(title)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
