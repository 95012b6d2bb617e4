"""
Reports page - cohort summaries, per-label charts and the post-processing ablation.
"""
import logging
import os

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from config.settings import CHART_COLORS, DATA_ROOT, EXPORT_FORMATS
from services.evaluation_service import ReportBundle, load_report_dir
from utils.export_helpers import export_to_csv, export_to_excel, export_to_json, generate_export_filename
from utils.formatters import METRIC_TITLES, format_difference_table, format_summary_table
from utils.hierarchy import FOREGROUND_LABELS
from utils.metrics import MEAN_ROW

logger = logging.getLogger(__name__)


def render():
    """Render the reports page."""
    report_dir = st.text_input("Report directory", value=os.path.join(DATA_ROOT, "reports"), key="report_dir")
    variant = st.radio("Report", ["final", "before post-processing", "after post-processing"], horizontal=True)
    suffix = {"final": "", "before post-processing": "_pre", "after post-processing": "_post"}[variant]

    try:
        bundle = load_report_dir(report_dir, suffix)
    except Exception as e:
        st.info(f"No report loaded: {e}")
        logger.debug(f"Report load failed for {report_dir}: {e}")
        return

    try:
        render_summary(bundle)
        col1, col2 = st.columns(2)
        with col1:
            render_dice_chart(bundle)
        with col2:
            render_bland_altman(bundle)
        if bundle.ablation is not None:
            render_ablation(bundle.ablation)
        render_downloads(bundle)
    except Exception as e:
        st.error(f"Error rendering report: {e}")
        logger.error(f"Reports page rendering error: {e}", exc_info=True)


def render_summary(bundle: ReportBundle):
    st.subheader(f"📋 Cohort summary ({bundle.num_cases} cases)")
    st.dataframe(format_summary_table(bundle.summary), use_container_width=True)
    undefined = pd.DataFrame(bundle.undefined).T
    if not undefined.empty and undefined.to_numpy().sum() > 0:
        with st.expander("Undefined metric counts"):
            st.dataframe(undefined, use_container_width=True)


def render_dice_chart(bundle: ReportBundle):
    """Per-case DSC by label."""
    st.subheader("🎯 DSC per label")
    cases = bundle.cases[bundle.cases["label"].isin(FOREGROUND_LABELS)]
    if cases.empty:
        st.info("No per-case rows")
        return
    fig = px.box(
        cases,
        x="label",
        y="dsc",
        color="label",
        points="all",
        category_orders={"label": list(FOREGROUND_LABELS)},
        color_discrete_sequence=CHART_COLORS,
        hover_data=["case_id"],
    )
    fig.update_layout(height=400, showlegend=False, xaxis_title="", yaxis_title=METRIC_TITLES["dsc"])
    st.plotly_chart(fig, use_container_width=True)


def bland_altman_frame(cases: pd.DataFrame, label: str) -> pd.DataFrame:
    """Mean and difference of predicted and reference volumes for one label."""
    part = cases[cases["label"] == label]
    return pd.DataFrame({
        "case_id": part["case_id"],
        "mean_ml": (part["pred_volume_ml"] + part["gt_volume_ml"]) / 2.0,
        "diff_ml": part["pred_volume_ml"] - part["gt_volume_ml"],
    })


def render_bland_altman(bundle: ReportBundle):
    st.subheader("📈 Volume agreement")
    label = st.selectbox("Label", list(FOREGROUND_LABELS), key="ba_label")
    frame = bland_altman_frame(bundle.cases, label)
    if len(frame) < 2:
        st.info("Bland-Altman needs at least two cases")
        return
    bias = float(frame["diff_ml"].mean())
    loa = 1.96 * float(frame["diff_ml"].std(ddof=1))
    fig = go.Figure(go.Scatter(
        x=frame["mean_ml"], y=frame["diff_ml"], mode="markers", text=frame["case_id"],
        marker=dict(color=CHART_COLORS[FOREGROUND_LABELS.index(label)], size=9),
    ))
    fig.add_hline(y=bias, line_dash="solid", annotation_text=f"bias {bias:.2f}")
    fig.add_hline(y=bias + loa, line_dash="dash", annotation_text=f"+1.96 sd {bias + loa:.2f}")
    fig.add_hline(y=bias - loa, line_dash="dash", annotation_text=f"-1.96 sd {bias - loa:.2f}")
    fig.update_layout(height=400, xaxis_title="Mean volume (ml)", yaxis_title="Predicted - reference (ml)")
    st.plotly_chart(fig, use_container_width=True)


def render_ablation(ablation: pd.DataFrame):
    st.subheader("🔧 Post-processing effect (after - before)")
    st.dataframe(format_difference_table(ablation), use_container_width=True)
    if "dsc" in ablation:
        per_label = ablation.drop(index=MEAN_ROW, errors="ignore")
        fig = px.bar(
            per_label.reset_index(names="label"),
            x="label",
            y="dsc",
            color="label",
            color_discrete_sequence=CHART_COLORS,
        )
        fig.update_layout(height=300, showlegend=False, yaxis_title="Δ DSC (%)", xaxis_title="")
        st.plotly_chart(fig, use_container_width=True)


def render_downloads(bundle: ReportBundle):
    st.subheader("💾 Export")
    export_format = st.selectbox("Format", EXPORT_FORMATS, key="report_export_format")
    if export_format == "CSV":
        data, mime = export_to_csv(bundle.cases), "text/csv"
    elif export_format == "JSON":
        data, mime = export_to_json(bundle.summary.to_dict(orient="index")), "application/json"
    else:
        data = export_to_excel({"summary": bundle.summary.reset_index(names="label"), "cases": bundle.cases})
        mime = "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"
    st.download_button(
        "Download",
        data=data,
        file_name=generate_export_filename("cohort report", export_format),
        mime=mime,
    )
