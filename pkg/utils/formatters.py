"""
Display formatting for metric values and report tables.
"""
import logging
from typing import Any, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

UNDEFINED = "-"

METRIC_DECIMALS = {
    "dsc": 1,
    "hd": 3,
    "hd95": 3,
    "assd": 3,
    "cc": 3,
    "mae": 3,
    "loa": 3,
    "crps": 3,
}

METRIC_TITLES = {
    "dsc": "DSC (%)",
    "hd": "HD (mm)",
    "hd95": "HD95 (mm)",
    "assd": "ASSD (mm)",
    "cc": "CC",
    "mae": "MAE (ml)",
    "loa": "LOA (ml)",
    "crps": "CRPS (ml)",
}


def _is_missing(value: Any) -> bool:
    try:
        return value is None or bool(pd.isna(value))
    except (TypeError, ValueError):
        return False


def format_number(value: Any, decimal_places: int = 3) -> str:
    """
    Format a number with fixed decimals; undefined values render as '-'.

    Args:
        value: Number to format
        decimal_places (int): Number of decimal places

    Returns:
        str: Formatted number
    """
    if _is_missing(value):
        return UNDEFINED
    try:
        return f"{float(value):.{decimal_places}f}"
    except (TypeError, ValueError):
        return str(value)


def format_metric(value: Any, metric: str) -> str:
    """Format a value with the decimals of its metric (DSC 1, everything else 3)."""
    return format_number(value, METRIC_DECIMALS.get(metric.lower(), 3))


def format_mean_std(mean: Any, std: Any, metric: str) -> str:
    """'mean ± std', or just the mean when std is missing."""
    if _is_missing(mean):
        return UNDEFINED
    if _is_missing(std):
        return format_metric(mean, metric)
    return f"{format_metric(mean, metric)} ± {format_metric(std, metric)}"


def format_volume(value_ml: Optional[float]) -> str:
    return UNDEFINED if _is_missing(value_ml) else f"{float(value_ml):.2f} ml"


def format_delta(value: Any, metric: str) -> str:
    """Signed difference, as in the before/after post-processing table."""
    if _is_missing(value):
        return UNDEFINED
    return f"{float(value):+.{METRIC_DECIMALS.get(metric.lower(), 3)}f}"


def format_summary_table(summary: pd.DataFrame) -> pd.DataFrame:
    """
    Render a cohort summary (columns <metric>_mean/<metric>_std and volume
    statistics) as display strings, one column per metric.

    Args:
        summary (pd.DataFrame): CohortReport.summary

    Returns:
        pd.DataFrame: String table indexed like the summary
    """
    table = pd.DataFrame(index=summary.index)
    for metric, title in METRIC_TITLES.items():
        if f"{metric}_mean" in summary:
            std = summary.get(f"{metric}_std", pd.Series(np.nan, index=summary.index))
            table[title] = [format_mean_std(m, s, metric) for m, s in zip(summary[f"{metric}_mean"], std)]
        elif metric in summary:
            table[title] = [format_metric(v, metric) for v in summary[metric]]
    return table


def format_difference_table(diff: pd.DataFrame) -> pd.DataFrame:
    """Signed rendering of a compare_reports frame."""
    table = pd.DataFrame(index=diff.index)
    for metric in diff.columns:
        table[METRIC_TITLES.get(metric, metric)] = [format_delta(v, metric) for v in diff[metric]]
    return table
