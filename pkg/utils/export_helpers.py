"""
Export utilities for metric tables, cohort reports and training logs.
"""
import io
import json
import logging
import os
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from utils.volume import write_bytes

logger = logging.getLogger(__name__)


def auto_adjust_columns(worksheet):
    """Auto-adjust column widths in Excel worksheet."""
    for column in worksheet.columns:
        longest = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
        worksheet.column_dimensions[column[0].column_letter].width = min(longest + 2, 50)


def clean_sheet_name_for_excel(name: str) -> str:
    """Replace characters Excel forbids in sheet names and cap the length at 31."""
    for char in ['\\', '/', '*', '[', ']', ':', '?']:
        name = name.replace(char, '_')
    return name[:31]


def export_to_excel(data, sheet_name: str = "Report", index: bool = False) -> bytes:
    """
    Export one DataFrame, or a dict of them (one sheet each), to an Excel workbook.

    Args:
        data: DataFrame or dict of DataFrames
        sheet_name (str): Sheet name for a single DataFrame
        index (bool): Whether to write the index column

    Returns:
        bytes: Workbook content
    """
    try:
        sheets = data if isinstance(data, dict) else {sheet_name: data}
        output = io.BytesIO()
        with pd.ExcelWriter(output, engine='openpyxl') as writer:
            for name, df in sheets.items():
                if df.empty:
                    continue
                clean_name = clean_sheet_name_for_excel(name)
                df.to_excel(writer, sheet_name=clean_name, index=index)
                auto_adjust_columns(writer.sheets[clean_name])
        logger.info(f"Exported {len(sheets)} sheet(s) to Excel")
        return output.getvalue()
    except Exception as e:
        logger.error(f"Error exporting to Excel: {e}", exc_info=True)
        raise


def export_to_csv(df: pd.DataFrame, index: bool = False, float_format: Optional[str] = "%.6g") -> str:
    """
    Export DataFrame to CSV text; NaN becomes an empty field.

    Args:
        df (pd.DataFrame): Data to export
        index (bool): Whether to write the index column
        float_format (str): printf-style float format, fixed so reruns are byte-identical

    Returns:
        str: CSV content
    """
    try:
        content = df.to_csv(index=index, float_format=float_format, lineterminator="\n")
        logger.debug(f"Exported {len(df)} rows to CSV")
        return content
    except Exception as e:
        logger.error(f"Error exporting to CSV: {e}", exc_info=True)
        raise


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return None if np.isnan(value) else float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def _nan_to_none(value: Any):
    if isinstance(value, dict):
        return {k: _nan_to_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_nan_to_none(v) for v in value]
    if isinstance(value, float) and np.isnan(value):
        return None
    return value


def export_to_json(data: Any, pretty: bool = True) -> str:
    """
    Export data to JSON text with sorted keys; NaN is written as null.

    Args:
        data: Data to export
        pretty (bool): Whether to indent

    Returns:
        str: JSON content
    """
    try:
        return json.dumps(
            _nan_to_none(data),
            indent=2 if pretty else None,
            ensure_ascii=False,
            sort_keys=True,
            default=_json_default,
        )
    except Exception as e:
        logger.error(f"Error exporting to JSON: {e}", exc_info=True)
        raise


def write_text(path: str, content: str) -> None:
    """Write UTF-8 text through the retrying byte writer."""
    write_bytes(path, content.encode("utf-8"))


def write_report_files(report, report_dir: str, suffix: str = "") -> Dict[str, str]:
    """
    Write cases<suffix>.csv and report<suffix>.json for a cohort report.

    Args:
        report (CohortReport): Report to write
        report_dir (str): Target directory
        suffix (str): File name suffix such as '_pre'

    Returns:
        dict: Written paths by kind
    """
    os.makedirs(report_dir, exist_ok=True)
    paths = {
        "cases": os.path.join(report_dir, f"cases{suffix}.csv"),
        "report": os.path.join(report_dir, f"report{suffix}.json"),
    }
    write_text(paths["cases"], export_to_csv(report.cases))
    payload = report.to_dict()
    write_text(paths["report"], export_to_json(payload))
    logger.info(f"Report written to {paths['report']}")
    return paths


def generate_export_filename(base_name: str, export_format: str) -> str:
    """Lower-case, underscore-separated file name with the format's extension."""
    clean_base = base_name.lower().replace(' ', '_').replace('-', '_')
    extension = {"excel": "xlsx"}.get(export_format.lower(), export_format.lower())
    return f"{clean_base}.{extension}"
