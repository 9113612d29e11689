"""
Console Tables - visualization/tables.py

RESPONSIBILITIES:
-----------------
Render prepared DataFrames and summaries as rich tables for the CLI.

CRITICAL RULES:
--------------
- ACCEPT PREPARED DATA ONLY - No computation
- RETURN rich Table objects - printing is the caller's job
"""

from collections.abc import Mapping
from typing import Any, Optional

import pandas as pd
from rich.table import Table


def frame_table(frame: pd.DataFrame, title: Optional[str] = None, precision: int = 4) -> Table:
    """One column per DataFrame column; floats rounded to ``precision``."""
    table = Table(title=title, show_lines=False)
    for i, column in enumerate(frame.columns):
        table.add_column(str(column), style="cyan" if i == 0 else None, justify="left" if i == 0 else "right")
    for _, row in frame.iterrows():
        table.add_row(*(_format(v, precision) for v in row.tolist()))
    return table


def summary_table(summary: Mapping[str, Any], title: Optional[str] = None) -> Table:
    """Two-column key/value table for run summaries."""
    table = Table(title=title, show_header=True)
    table.add_column("Field", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in summary.items():
        if isinstance(value, (list, dict)):
            continue
        table.add_row(str(key), _format(value, 4))
    return table


def _format(value: Any, precision: int) -> str:
    if isinstance(value, float):
        return f"{value:.{precision}f}"
    if value is None:
        return "-"
    return str(value)
