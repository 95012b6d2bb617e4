"""
Per-slice PNG overlays of labels (and optionally entropy) on an image.
"""
import io
import logging
import os
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from config.settings import LABEL_COLORS  # noqa: E402
from utils.hierarchy import STAGE3_LABEL_NAMES  # noqa: E402
from utils.volume import LabelVolume, ScalarVolume, require_same_geometry, write_bytes  # noqa: E402

logger = logging.getLogger(__name__)


def label_colormap() -> ListedColormap:
    # background is drawn fully transparent by masking, its colour is unused
    return ListedColormap(LABEL_COLORS[:len(STAGE3_LABEL_NAMES)])


def render_slice(
    image: ScalarVolume,
    labels: LabelVolume,
    z: int,
    entropy: Optional[ScalarVolume] = None,
    alpha: float = 0.45,
) -> bytes:
    """
    Render slice z as PNG bytes: image with label overlay, and the entropy map
    as a second panel when given.
    """
    require_same_geometry(image, labels, "image and labels")
    panels = 2 if entropy is not None else 1
    aspect = image.spacing[1] / image.spacing[0]
    fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 4), squeeze=False)
    try:
        ax = axes[0, 0]
        # transpose so x runs left-right and y top-bottom
        ax.imshow(image.data[:, :, z].T, cmap="gray", aspect=aspect)
        codes = np.ma.masked_equal(labels.data[:, :, z].T.astype(int), 0)
        ax.imshow(codes, cmap=label_colormap(), vmin=0, vmax=len(STAGE3_LABEL_NAMES) - 1,
                  alpha=alpha, interpolation="nearest", aspect=aspect)
        ax.set_title(f"z = {z}")
        ax.axis("off")
        if entropy is not None:
            require_same_geometry(image, entropy, "image and entropy")
            ax = axes[0, 1]
            shown = ax.imshow(entropy.data[:, :, z].T, cmap="magma", vmin=0.0, vmax=np.log(len(STAGE3_LABEL_NAMES)),
                              aspect=aspect)
            fig.colorbar(shown, ax=ax, fraction=0.046)
            ax.set_title("entropy (nats)")
            ax.axis("off")
        buffer = io.BytesIO()
        fig.savefig(buffer, format="png", dpi=100, bbox_inches="tight")
        return buffer.getvalue()
    finally:
        plt.close(fig)


def export_overlays(
    image: ScalarVolume,
    labels: LabelVolume,
    out_dir: str,
    entropy: Optional[ScalarVolume] = None,
    prefix: str = "slice",
) -> List[str]:
    """
    Write one PNG per z-slice.

    Returns:
        list: Written paths
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for z in range(image.dims[2]):
        path = os.path.join(out_dir, f"{prefix}_{z:03d}.png")
        write_bytes(path, render_slice(image, labels, z, entropy))
        paths.append(path)
    logger.info(f"Wrote {len(paths)} overlay slices to {out_dir}")
    return paths
