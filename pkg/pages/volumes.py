"""
Volumes page - slice viewer for MVOL images, label maps and entropy maps.
"""
import logging
import os

import numpy as np
import plotly.graph_objects as go
import streamlit as st

from config.settings import LABEL_COLORS
from utils.hierarchy import STAGE3_LABEL_NAMES
from utils.volume import LabelVolume, read_meta, read_mvol

logger = logging.getLogger(__name__)


@st.cache_data(show_spinner=False)
def load_volume(path: str):
    volume = read_mvol(path)
    return np.asarray(volume.data), volume.spacing, isinstance(volume, LabelVolume)


def label_colorscale():
    """Discrete plotly colorscale mapping each label code to its palette colour."""
    n = len(STAGE3_LABEL_NAMES)
    scale = []
    for code, color in enumerate(LABEL_COLORS[:n]):
        scale.append([code / n, color])
        scale.append([(code + 1) / n, color])
    return scale


def render():
    """Render the volume viewer."""
    col1, col2, col3 = st.columns(3)
    with col1:
        image_path = st.text_input("Image (.mvol)", key="vol_image")
    with col2:
        labels_path = st.text_input("Labels (.mvol, optional)", key="vol_labels")
    with col3:
        entropy_path = st.text_input("Entropy (.mvol, optional)", key="vol_entropy")

    if not image_path or not os.path.exists(image_path):
        st.info("Enter the path of an image volume")
        return

    try:
        image, spacing, _ = load_volume(image_path)
        labels = load_volume(labels_path)[0] if labels_path and os.path.exists(labels_path) else None
        entropy = load_volume(entropy_path)[0] if entropy_path and os.path.exists(entropy_path) else None
        for name, other in (("labels", labels), ("entropy", entropy)):
            if other is not None and other.shape != image.shape:
                st.error(f"The {name} volume {other.shape} does not match the image {image.shape}")
                return

        st.caption(f"dims {image.shape}, spacing {tuple(round(s, 3) for s in spacing)} mm")
        meta = read_meta(labels_path) if labels is not None else {}
        if meta:
            with st.expander("Sidecar"):
                st.json(meta)

        z = st.slider("Slice (z)", 0, image.shape[2] - 1, image.shape[2] // 2, key="vol_slice")
        opacity = st.slider("Label opacity", 0.0, 1.0, 0.4, key="vol_opacity")
        render_slice(image, labels, z, opacity, spacing)
        if entropy is not None:
            render_entropy(entropy, z, spacing)
    except Exception as e:
        st.error(f"Error loading volumes: {e}")
        logger.error(f"Volume viewer error: {e}", exc_info=True)


def render_slice(image: np.ndarray, labels, z: int, opacity: float, spacing):
    fig = go.Figure(go.Heatmap(z=image[:, :, z].T, colorscale="gray", showscale=False))
    if labels is not None:
        codes = labels[:, :, z].T.astype(float)
        codes[codes == 0] = np.nan
        fig.add_trace(go.Heatmap(
            z=codes, colorscale=label_colorscale(), zmin=0, zmax=len(STAGE3_LABEL_NAMES),
            opacity=opacity, showscale=False, hoverinfo="z",
        ))
    fig.update_yaxes(autorange="reversed", scaleanchor="x", scaleratio=spacing[1] / spacing[0])
    fig.update_layout(height=520, margin=dict(l=10, r=10, t=30, b=10), title=f"z = {z}")
    st.plotly_chart(fig, use_container_width=True)


def render_entropy(entropy: np.ndarray, z: int, spacing):
    st.subheader("Predictive entropy")
    fig = go.Figure(go.Heatmap(
        z=entropy[:, :, z].T, colorscale="Magma", zmin=0.0, zmax=float(np.log(len(STAGE3_LABEL_NAMES))),
    ))
    fig.update_yaxes(autorange="reversed", scaleanchor="x", scaleratio=spacing[1] / spacing[0])
    fig.update_layout(height=420, margin=dict(l=10, r=10, t=10, b=10))
    st.plotly_chart(fig, use_container_width=True)
