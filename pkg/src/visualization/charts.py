"""
Report Charts - visualization/charts.py

RESPONSIBILITIES:
-----------------
Plotly figures for the evaluation report and dataset statistics.

CRITICAL RULES:
--------------
- ACCEPT PREPARED DATA ONLY - DataFrames from services/
- RETURN PLOTLY FIGURES - writing is a separate call
"""

from collections.abc import Sequence
from pathlib import Path
from typing import Optional

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from utils.io_helpers import PathLike, atomic_write


DEFAULT_COLORS = [
    '#1f77b4',  # Blue
    '#ff7f0e',  # Orange
    '#2ca02c',  # Green
    '#d62728',  # Red
    '#9467bd',  # Purple
    '#8c564b',  # Brown
]

PHASE_COLORS = {
    "clear": "#bbbbbb",
    "ice": "#0000ff",
    "mixed": "#ff0000",
    "liquid": "#00a000",
}


# ============================================================================
# EVALUATION
# ============================================================================

def per_class_bars(
    per_class: pd.DataFrame,
    class_names: Optional[Sequence[str]] = None,
    metrics: Sequence[str] = ("Precision", "Recall", "F1"),
    height: int = 450,
    width: int = 1200,
) -> go.Figure:
    """
    One panel per metric, grouped bars per class, one trace per model.

    Args:
        per_class: long table with Models, Class and one column per metric
        class_names: x-axis order
    """
    classes = list(class_names) if class_names is not None else list(dict.fromkeys(per_class["Class"]))
    fig = make_subplots(rows=1, cols=len(metrics), subplot_titles=[f"Macro {m}" for m in metrics])

    for i, model in enumerate(dict.fromkeys(per_class["Models"])):
        rows = per_class[per_class["Models"] == model].set_index("Class").reindex(classes)
        for j, metric in enumerate(metrics):
            fig.add_trace(
                go.Bar(
                    x=classes,
                    y=rows[metric].tolist(),
                    name=str(model),
                    legendgroup=str(model),
                    showlegend=j == 0,
                    marker_color=DEFAULT_COLORS[i % len(DEFAULT_COLORS)],
                ),
                row=1,
                col=j + 1,
            )

    fig.update_yaxes(range=[0, 1])
    fig.update_layout(barmode="group", height=height, width=width, font=dict(size=12))
    return fig


# ============================================================================
# DATASET STATISTICS
# ============================================================================

def channel_density_figure(densities: pd.DataFrame, height: int = 500, width: int = 900) -> go.Figure:
    """Line per band of a (band, bin_center, density) long table."""
    fig = go.Figure()
    for band, rows in densities.groupby("band", sort=True):
        fig.add_trace(go.Scatter(x=rows["bin_center"], y=rows["density"], mode="lines", name=str(band)))
    fig.update_layout(
        title="Per-band value density",
        xaxis_title="value",
        yaxis_title="density",
        height=height,
        width=width,
    )
    return fig


def vertical_coverage_figure(coverage: pd.DataFrame, height: int = 600, width: int = 500) -> go.Figure:
    """Cloud fraction per layer (x) against layer-centre altitude (y), one trace per phase."""
    fig = go.Figure()
    for phase in [c for c in coverage.columns if c in PHASE_COLORS and c != "clear"]:
        fig.add_trace(go.Scatter(
            x=coverage[phase],
            y=coverage["altitude_km"],
            mode="lines+markers",
            name=phase,
            line=dict(color=PHASE_COLORS[phase]),
        ))
    fig.update_layout(
        title="Vertical cloud coverage",
        xaxis_title="fraction of labelled voxels",
        yaxis_title="altitude (km)",
        height=height,
        width=width,
    )
    return fig


def write_html(fig: go.Figure, path: PathLike) -> Path:
    """Standalone HTML; plotly.js loaded from the CDN."""
    with atomic_write(path, "w", encoding="utf-8") as f:
        f.write(fig.to_html(include_plotlyjs="cdn", full_html=True))
    return Path(path)
