"""Trajectory-fan figure of a run, written as deterministic SVG."""
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle

from .logger import get_logger
from .optics import ElementKind, Layout, NEVER
from .pilotwave import Trajectory

logger = get_logger("SVG_PLOTTER")

CHANNEL_COLORS = {1: "tab:blue", 2: "tab:orange", None: "tab:gray"}


def _draw_layout(ax, layout: Layout):
    for element in layout.elements:
        position = np.asarray(element.position)
        if element.kind == ElementKind.DETECTOR:
            ax.add_patch(Circle(position, element.aperture, fill=False, color="black", lw=1.0))
            ax.annotate(element.label, position, ha="center", va="center", fontsize=8)
            continue
        ends = position + np.outer([-1.0, 1.0], element.tangent * element.aperture)
        style = "-" if element.kind == ElementKind.MIRROR else "--"
        width = 2.5 if element.kind == ElementKind.MIRROR else 1.5
        alpha = 0.3 if element.active_interval == NEVER else 1.0
        ax.plot(ends[:, 0], ends[:, 1], style, color="black", lw=width, alpha=alpha)
    geometry = layout.geometry
    ax.add_patch(Circle(geometry.i2_center, geometry.i2_radius, fill=False, ls=":", color="green", lw=1.0))


def plot_trajectories(layout: Layout, trajectories: Sequence[Trajectory], path,
                      max_trajectories: int = 200, title: Optional[str] = None) -> Path:
    """
    Draw the interferometer and an evenly spaced subset of trajectories,
    colored by channel.
    """
    plt.rcParams["svg.hashsalt"] = "pilotwave-mach-zehnder"
    fig, ax = plt.subplots(figsize=(6, 6))
    try:
        _draw_layout(ax, layout)
        if trajectories:
            count = min(max_trajectories, len(trajectories))
            chosen = np.unique(np.linspace(0, len(trajectories) - 1, count).astype(int))
            for k in chosen:
                trajectory = trajectories[k]
                ax.plot(trajectory.particle[:, 0], trajectory.particle[:, 1], lw=0.4, alpha=0.6,
                        color=CHANNEL_COLORS.get(trajectory.channel, "tab:gray"))
        ax.set_aspect("equal")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        if title:
            ax.set_title(title)
        path = Path(path)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info(f"Wrote trajectory figure to {path}")
    return path
