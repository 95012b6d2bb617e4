"""
Training-time augmentation and the shared train/test intensity normalization.

Spatial augmentation builds a single output-to-input coordinate map and
samples the image trilinearly and the labels by nearest neighbour through it,
so both stay registered.
"""
import logging
import zlib
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from config.settings import AugmentRanges
from utils.errors import DegenerateIntensities
from utils.volume import (
    LabelVolume, ScalarVolume, require_same_geometry, resample_trilinear,
    sample_nearest, sample_trilinear,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentParams:
    translation: np.ndarray      # (3,) output voxels
    rotation: np.ndarray         # (3,) radians about x, y, z
    iso_scale: float
    aniso_scale: np.ndarray      # (3,)
    elastic_grid: np.ndarray     # (n, n, n, 3) output voxels
    intensity_shift: float
    intensity_scale: float
    per_label_shift: np.ndarray  # (K,)
    per_label_scale: np.ndarray  # (K,)

    @classmethod
    def identity(cls, num_labels: int, elastic_nodes: int = 8) -> "AugmentParams":
        return cls(
            translation=np.zeros(3),
            rotation=np.zeros(3),
            iso_scale=1.0,
            aniso_scale=np.ones(3),
            elastic_grid=np.zeros((elastic_nodes,) * 3 + (3,)),
            intensity_shift=0.0,
            intensity_scale=1.0,
            per_label_shift=np.zeros(num_labels),
            per_label_scale=np.ones(num_labels),
        )


def case_rng(seed: int, case_id: str, iteration: int = 0) -> np.random.Generator:
    """Independent reproducible stream per (global seed, case, iteration)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(case_id.encode("utf-8")), int(iteration)]))


def normalize_percentile(img: ScalarVolume) -> ScalarVolume:
    """
    Map the 10th percentile to -1 and the 90th to +1, extrapolating linearly.

    Percentiles interpolate linearly between order statistics.

    Args:
        img (ScalarVolume): Raw intensities

    Returns:
        ScalarVolume: Normalized intensities on the same grid
    """
    values = np.asarray(img.data, dtype=np.float64)
    p10, p90 = np.percentile(values, [10.0, 90.0])
    if p90 - p10 <= 0:
        raise DegenerateIntensities(f"10th and 90th percentile coincide ({p10:g})")
    return img.with_data(2.0 * (values - p10) / (p90 - p10) - 1.0)


def sample_params(rng: np.random.Generator, num_labels: int, ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    """
    Draw augmentation parameters uniformly from their ranges.

    Args:
        rng (np.random.Generator): Random stream
        num_labels (int): K, the number of per-label modulations
        ranges (AugmentRanges): Sampling ranges

    Returns:
        AugmentParams: One parameter set
    """
    n = ranges.elastic_nodes
    t, r, m = ranges.translation, ranges.rotation, ranges.elastic_magnitude
    return AugmentParams(
        translation=rng.uniform(-t, t, 3),
        rotation=rng.uniform(-r, r, 3),
        iso_scale=float(rng.uniform(*ranges.iso_scale)),
        aniso_scale=rng.uniform(*ranges.aniso_scale, 3),
        elastic_grid=rng.uniform(-m, m, (n, n, n, 3)),
        intensity_shift=float(rng.uniform(-ranges.intensity_shift, ranges.intensity_shift)),
        intensity_scale=float(rng.uniform(*ranges.intensity_scale)),
        per_label_shift=rng.uniform(-ranges.label_shift, ranges.label_shift, num_labels),
        per_label_scale=rng.uniform(*ranges.label_scale, num_labels),
    )


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """R = Rx @ Ry @ Rz (intrinsic x, y, z order)."""
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def elastic_displacement(grid: np.ndarray, out_dims: Sequence[int]) -> np.ndarray:
    """Trilinear interpolation of node displacements over the output grid, shape (3, *out_dims)."""
    nodes = grid.shape[:3]
    axes = [
        np.arange(n, dtype=np.float64) * ((k - 1) / (n - 1)) if n > 1 else np.zeros(1)
        for n, k in zip(out_dims, nodes)
    ]
    node_coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return np.stack([sample_trilinear(grid[..., d], node_coords) for d in range(3)])


def spatial_coordinates(
    p: AugmentParams,
    src_spacing: Sequence[float],
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
) -> np.ndarray:
    """
    Source voxel coordinates of every output voxel, shape (3, *out_dims).

    Output coordinates get the elastic displacement, then the inverse
    anisotropic and isotropic scale and the rotation about the grid center,
    then the translation, and are finally converted to source voxel units.
    """
    out_dims = tuple(int(n) for n in out_dims)
    center = (np.asarray(out_dims, dtype=np.float64) - 1.0) / 2.0
    coords = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in out_dims], indexing="ij"))
    if np.any(p.elastic_grid):
        coords = coords + elastic_displacement(p.elastic_grid, out_dims)

    shape = (3,) + (1,) * len(out_dims)
    q = coords - center.reshape(shape)
    q = q / np.asarray(p.aniso_scale, dtype=np.float64).reshape(shape)
    q = q / float(p.iso_scale)
    q = np.tensordot(rotation_matrix(p.rotation), q, axes=([1], [0]))
    q = q - np.asarray(p.translation, dtype=np.float64).reshape(shape)
    q = q + center.reshape(shape)
    ratio = np.asarray(out_spacing, dtype=np.float64) / np.asarray(src_spacing, dtype=np.float64)
    return q * ratio.reshape(shape)


def apply_spatial(
    img: ScalarVolume,
    labels: LabelVolume,
    p: AugmentParams,
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
) -> Tuple[ScalarVolume, LabelVolume]:
    """
    Warp image and labels through one coordinate map onto the target grid.

    Args:
        img (ScalarVolume): Image
        labels (LabelVolume): Labels on the image grid
        p (AugmentParams): Spatial parameters
        out_dims: Target voxel counts
        out_spacing: Target spacing in mm

    Returns:
        tuple: (warped image, warped labels)
    """
    require_same_geometry(img, labels, "image and labels")
    coords = spatial_coordinates(p, img.spacing, out_dims, out_spacing)
    warped_img = ScalarVolume(sample_trilinear(img.data, coords), tuple(out_spacing))
    warped_labels = LabelVolume(sample_nearest(labels.data, coords), tuple(out_spacing), labels.schema)
    return warped_img, warped_labels


def apply_intensity(img: ScalarVolume, labels: LabelVolume, p: AugmentParams) -> ScalarVolume:
    """
    Global affine intensity change followed by a per-label one.

    Args:
        img (ScalarVolume): Normalized image
        labels (LabelVolume): Labels on the same grid
        p (AugmentParams): Intensity parameters

    Returns:
        ScalarVolume: Modulated image
    """
    require_same_geometry(img, labels, "image and labels")
    values = np.asarray(img.data, dtype=np.float64) * p.intensity_scale + p.intensity_shift
    codes = labels.data
    values = values * np.asarray(p.per_label_scale)[codes] + np.asarray(p.per_label_shift)[codes]
    return img.with_data(values)


def preprocess_eval(img: ScalarVolume, out_dims: Sequence[int], out_spacing: Sequence[float]) -> ScalarVolume:
    """Normalize then resample onto the model grid; the test-time recipe."""
    return resample_trilinear(normalize_percentile(img), out_dims, out_spacing)


def augment_pair(
    img: ScalarVolume,
    labels: LabelVolume,
    rng: np.random.Generator,
    ranges: AugmentRanges,
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
    num_labels: int = 5,
) -> Tuple[ScalarVolume, LabelVolume]:
    """
    Training-time recipe: normalize, draw parameters, warp, modulate intensities.

    Returns:
        tuple: (augmented image, labels on the same grid)
    """
    normalized = normalize_percentile(img)
    params = sample_params(rng, num_labels, ranges)
    warped_img, warped_labels = apply_spatial(normalized, labels, params, out_dims, out_spacing)
    return apply_intensity(warped_img, warped_labels, params), warped_labels
