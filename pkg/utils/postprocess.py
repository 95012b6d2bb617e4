"""
Anatomical clean-up of hard predictions: disconnected-component removal in
3D and per slice, top-most slice removal and Gaussian-vote replacement of
small outlier regions.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from config.settings import PostprocessConfig
from utils.errors import SchemaMismatch
from utils.hierarchy import BG, num_labels
from utils.volume import LabelVolume

logger = logging.getLogger(__name__)

BASE_ENDS = ("z_max", "z_min")


@dataclass(frozen=True)
class ComponentMap:
    ids: np.ndarray           # 0 = background, components numbered from 1
    sizes_voxels: np.ndarray  # entry i belongs to component i + 1
    voxel_volume_ml: float

    @property
    def count(self) -> int:
        return int(self.sizes_voxels.size)

    @property
    def sizes_ml(self) -> np.ndarray:
        return self.sizes_voxels * self.voxel_volume_ml

    def largest(self) -> int:
        """Id of the largest component; ties go to the one starting first in x-fastest order."""
        if self.count == 0:
            return 0
        candidates = np.flatnonzero(self.sizes_voxels == self.sizes_voxels.max()) + 1
        if candidates.size == 1:
            return int(candidates[0])
        linear = np.arange(self.ids.size).reshape(self.ids.shape, order="F")
        starts = ndimage.minimum(linear, labels=self.ids, index=candidates)
        return int(candidates[int(np.argmin(starts))])


@dataclass(frozen=True)
class PostprocessSteps:
    disconnected_3d: bool = True
    disconnected_2d: bool = True
    topmost_slice: bool = True
    outliers: bool = True
    base_at: str = "z_max"
    min_volume_ml: float = 0.1
    window: Tuple[int, int, int] = (9, 9, 5)
    sigma_mm: float = 2.0

    def __post_init__(self):
        if self.base_at not in BASE_ENDS:
            raise ValueError(f"base_at must be one of {BASE_ENDS}, got '{self.base_at}'")
        if any(w < 1 or w % 2 == 0 for w in self.window):
            raise ValueError(f"Voting window must have odd positive sizes, got {self.window}")

    @classmethod
    def from_config(cls, cfg: PostprocessConfig) -> "PostprocessSteps":
        return cls(
            disconnected_3d=cfg.disconnected_3d,
            disconnected_2d=cfg.disconnected_2d,
            topmost_slice=cfg.topmost_slice,
            outliers=cfg.outliers,
            base_at=cfg.base_at,
            min_volume_ml=cfg.min_volume_ml,
            window=tuple(cfg.window),
            sigma_mm=cfg.sigma_mm,
        )


def _check_schema(pred: LabelVolume) -> None:
    if pred.schema not in (2, 3):
        raise SchemaMismatch(f"Post-processing needs stage-2 or stage-3 labels, got stage-{pred.schema}")


def label_components(mask: np.ndarray, connectivity: int = 6, voxel_volume_ml: float = 0.0) -> ComponentMap:
    """
    Connected components of a boolean mask.

    Args:
        mask (np.ndarray): 3D mask for connectivity 6, 2D mask for connectivity 4
        connectivity (int): 6 (faces in 3D) or 4 (edges in 2D)
        voxel_volume_ml (float): Volume of one voxel, for sizes in ml

    Returns:
        ComponentMap: Component ids and sizes
    """
    if connectivity == 6 and mask.ndim == 3:
        structure = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 4 and mask.ndim == 2:
        structure = ndimage.generate_binary_structure(2, 1)
    else:
        raise ValueError(f"Connectivity {connectivity} does not fit a {mask.ndim}D mask")
    ids, count = ndimage.label(mask, structure=structure)
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:]
    return ComponentMap(ids, sizes, voxel_volume_ml)


def _keep_largest(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Boolean mask of what to drop: every component except the largest."""
    cmap = label_components(mask, connectivity)
    if cmap.count <= 1:
        return np.zeros(mask.shape, dtype=bool)
    return (cmap.ids > 0) & (cmap.ids != cmap.largest())


def remove_disconnected_3d(pred: LabelVolume) -> LabelVolume:
    """Keep only the largest 6-connected component of the whole foreground."""
    _check_schema(pred)
    drop = _keep_largest(pred.data != BG, 6)
    if not drop.any():
        return pred
    data = pred.data.copy()
    data[drop] = BG
    logger.debug(f"Removed {int(drop.sum())} disconnected foreground voxels (3D)")
    return pred.with_data(data)


def remove_disconnected_2d(pred: LabelVolume) -> LabelVolume:
    """Per z-slice, keep only the largest 4-connected foreground component."""
    _check_schema(pred)
    data = pred.data.copy()
    removed = 0
    for z in range(data.shape[2]):
        drop = _keep_largest(data[:, :, z] != BG, 4)
        if drop.any():
            data[:, :, z][drop] = BG
            removed += int(drop.sum())
    if not removed:
        return pred
    logger.debug(f"Removed {removed} disconnected foreground voxels (2D)")
    return pred.with_data(data)


def remove_topmost_slice(pred: LabelVolume, base_at: str = "z_max") -> LabelVolume:
    """
    Clear the base-most foreground slice when it holds less than half the
    foreground of its apical neighbour. Applied once.

    Args:
        pred (LabelVolume): Hard prediction
        base_at (str): 'z_max' or 'z_min', the end of the z axis facing the base

    Returns:
        LabelVolume: Prediction with the top slice possibly cleared
    """
    _check_schema(pred)
    if base_at not in BASE_ENDS:
        raise ValueError(f"base_at must be one of {BASE_ENDS}, got '{base_at}'")
    counts = np.count_nonzero(pred.data != BG, axis=(0, 1))
    occupied = np.flatnonzero(counts)
    if occupied.size == 0:
        return pred
    if base_at == "z_max":
        top, neighbour = int(occupied[-1]), int(occupied[-1]) - 1
    else:
        top, neighbour = int(occupied[0]), int(occupied[0]) + 1
    below = counts[neighbour] if 0 <= neighbour < counts.size else 0
    if not counts[top] < 0.5 * below:
        return pred
    data = pred.data.copy()
    data[:, :, top] = BG
    logger.debug(f"Cleared top-most slice z={top} ({int(counts[top])} vs {int(below)} voxels)")
    return pred.with_data(data)


def gaussian_vote_kernel(spacing: Sequence[float], window: Sequence[int], sigma_mm: float) -> np.ndarray:
    """Unnormalized weights exp(-d^2 / (2 sigma^2)) over the window, d in mm."""
    axes = [np.arange(w, dtype=np.float64) - (w - 1) / 2.0 for w in window]
    dx, dy, dz = np.meshgrid(*axes, indexing="ij")
    d2 = (dx * spacing[0]) ** 2 + (dy * spacing[1]) ** 2 + (dz * spacing[2]) ** 2
    return np.exp(-d2 / (2.0 * sigma_mm ** 2))


def outlier_mask(pred: LabelVolume, min_volume_ml: float = 0.1) -> np.ndarray:
    """Voxels of non-background 6-connected components smaller than min_volume_ml."""
    outliers = np.zeros(pred.dims, dtype=bool)
    voxel_mm3 = float(np.prod(pred.spacing))
    for code in range(1, num_labels(pred.schema)):
        mask = pred.data == code
        if not mask.any():
            continue
        cmap = label_components(mask, 6, pred.voxel_volume_ml)
        # compare in mm^3 with a small tolerance so exactly 0.1 ml is not an outlier
        small = np.flatnonzero(cmap.sizes_voxels * voxel_mm3 < min_volume_ml * 1000.0 - 1e-6) + 1
        if small.size:
            outliers |= np.isin(cmap.ids, small)
    return outliers


def replace_outlier_regions(
    pred: LabelVolume,
    min_volume_ml: float = 0.1,
    window: Sequence[int] = (9, 9, 5),
    sigma_mm: float = 2.0,
) -> LabelVolume:
    """
    Relabel small regions by a Gaussian-weighted vote of their non-outlier neighbourhood.

    Every outlier voxel takes the label (background included) with the largest
    summed weight inside the window; all voxels are relabelled from the input
    at once and voxels without any voter keep their label.

    Args:
        pred (LabelVolume): Hard prediction
        min_volume_ml (float): Components below this volume are outliers
        window: Voting window in voxels (x, y, z)
        sigma_mm (float): Gaussian width in mm

    Returns:
        LabelVolume: Prediction with outliers replaced
    """
    _check_schema(pred)
    outliers = outlier_mask(pred, min_volume_ml)
    if not outliers.any():
        return pred

    kernel = gaussian_vote_kernel(pred.spacing, window, sigma_mm)
    k = num_labels(pred.schema)
    votes = np.zeros((k,) + pred.dims)
    for code in range(k):
        voters = ((pred.data == code) & ~outliers).astype(np.float64)
        if voters.any():
            votes[code] = ndimage.correlate(voters, kernel, mode="constant", cval=0.0)

    winner = np.argmax(votes, axis=0)
    has_voters = votes.max(axis=0) > 0
    change = outliers & has_voters
    data = pred.data.copy()
    data[change] = winner[change]
    logger.debug(f"Replaced {int(change.sum())} outlier voxels")
    return pred.with_data(data)


def postprocess_pipeline(pred: LabelVolume, steps: PostprocessSteps = PostprocessSteps()) -> LabelVolume:
    """
    3D component removal, 2D component removal, top-most slice removal and
    outlier replacement, each fed the previous output; disabled steps are skipped.
    """
    out = pred
    if steps.disconnected_3d:
        out = remove_disconnected_3d(out)
    if steps.disconnected_2d:
        out = remove_disconnected_2d(out)
    if steps.topmost_slice:
        out = remove_topmost_slice(out, steps.base_at)
    if steps.outliers:
        out = replace_outlier_regions(out, steps.min_volume_ml, steps.window, steps.sigma_mm)
    return out
