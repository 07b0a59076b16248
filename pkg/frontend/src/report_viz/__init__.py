"""Figures and HTML reports rendered from exported experiment files.

Consumes only documented interchange files (metrics CSV, routing CSV,
allocation JSON, results JSON); never loads model checkpoints. Rendering
is read-only and deterministic, and every number in a report is carried
through from the inputs verbatim.
"""

from .frames import FrameError, MetricsFrame, RoutingFrame
from .plots import plot_loss, plot_routing_heatmap
from .report import render_report

__version__ = "0.1.0"

__all__ = [
    "FrameError",
    "MetricsFrame",
    "RoutingFrame",
    "plot_loss",
    "plot_routing_heatmap",
    "render_report",
]
