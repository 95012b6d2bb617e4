"""
Dense 3D/4D volume model with physical spacing, MVOL file I/O, resampling
and channel utilities.

Arrays are indexed [x, y, z] (ProbVolume: [k, x, y, z]). Voxel (i, j, k)
has its physical center at (i*sx, j*sy, k*sz). On disk the payload is
x-fastest, which is Fortran order for these arrays.
"""
import json
import os
import struct
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, special
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from config.settings import MAX_RETRIES
from utils.errors import (
    BadMagic, CodeOutOfRange, GeometryMismatch, IoFailure, MissingSidecar,
    NotProbabilities, TruncatedFile, UnknownDtype,
)

logger = logging.getLogger(__name__)

MVOL_MAGIC = b"MVOL1\x00"
MVOL_HEADER = struct.Struct("<6sB3I3f")
DTYPE_SCALAR = 0
DTYPE_LABEL = 1
PROB_SUM_TOLERANCE = 1e-5

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


class ProbKind(str, Enum):
    LOGITS = "LOGITS"
    PROBS = "PROBS"


def _check_geometry(shape: Sequence[int], spacing: Sequence[float]) -> Spacing:
    if len(shape) != 3 or any(int(n) < 1 for n in shape):
        raise ValueError(f"Volume dims must be three positive counts, got {tuple(shape)}")
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise ValueError(f"Volume spacing must be three positive values, got {tuple(spacing)}")
    # spacing is held at float32 precision so it survives the file format unchanged
    return tuple(float(np.float32(s)) for s in spacing)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ScalarVolume:
    """Real-valued 3D image (float32 payload, like the file format)."""
    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        object.__setattr__(self, 'spacing', _check_geometry(data.shape, self.spacing))
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_ml(self) -> float:
        return float(np.prod(self.spacing)) / 1000.0

    def with_data(self, data: np.ndarray) -> "ScalarVolume":
        return ScalarVolume(data, self.spacing)


@dataclass(frozen=True)
class LabelVolume:
    """Small-integer label grid tagged with its label schema stage (1, 2 or 3)."""
    data: np.ndarray
    spacing: Spacing
    schema: int = 3

    def __post_init__(self):
        # local import: hierarchy builds on this module
        from utils.hierarchy import SCHEMAS

        raw = np.asarray(self.data)
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise CodeOutOfRange(f"Label codes must fit in u8, got range [{raw.min()}, {raw.max()}]")
        data = np.array(raw, dtype=np.uint8)
        spacing = _check_geometry(data.shape, self.spacing)
        if self.schema not in SCHEMAS:
            raise CodeOutOfRange(f"Unknown label schema stage {self.schema}")
        k = SCHEMAS[self.schema].num_labels
        if data.size and int(data.max()) >= k:
            raise CodeOutOfRange(
                f"Label code {int(data.max())} is not part of the stage-{self.schema} schema (K={k})"
            )
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_ml(self) -> float:
        return float(np.prod(self.spacing)) / 1000.0

    def with_data(self, data: np.ndarray, schema: Optional[int] = None) -> "LabelVolume":
        return LabelVolume(data, self.spacing, self.schema if schema is None else schema)


@dataclass(frozen=True)
class ProbVolume:
    """K-channel per-voxel scores; kind tells logits from probabilities."""
    data: np.ndarray
    spacing: Spacing
    kind: ProbKind = ProbKind.PROBS
    schema: Optional[int] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] < 1:
            raise ValueError(f"ProbVolume data must be (K, nx, ny, nz), got {data.shape}")
        spacing = _check_geometry(data.shape[1:], self.spacing)
        kind = ProbKind(self.kind)
        if kind == ProbKind.PROBS:
            if data.min() < -PROB_SUM_TOLERANCE or data.max() > 1.0 + PROB_SUM_TOLERANCE:
                raise NotProbabilities("PROBS values must lie in [0, 1]")
            if np.abs(data.sum(axis=0) - 1.0).max() > PROB_SUM_TOLERANCE:
                raise NotProbabilities("PROBS channels must sum to 1 per voxel")
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'kind', kind)
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape[1:])


AnyVolume = Union[ScalarVolume, LabelVolume, ProbVolume]


def same_geometry(a: AnyVolume, b: AnyVolume) -> bool:
    return a.dims == b.dims and np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9)


def require_same_geometry(a: AnyVolume, b: AnyVolume, what: str = "volumes") -> None:
    if not same_geometry(a, b):
        raise GeometryMismatch(
            f"{what} differ in geometry: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}"
        )


# ---------------------------------------------------------------------------
# MVOL I/O
# ---------------------------------------------------------------------------

def read_mvol(path: str) -> Union[ScalarVolume, LabelVolume]:
    """
    Read an MVOL file.

    Args:
        path (str): File path

    Returns:
        ScalarVolume or LabelVolume exactly as written
    """
    with open(path, 'rb') as f:
        raw = f.read()

    if len(raw) < len(MVOL_MAGIC) or raw[:len(MVOL_MAGIC)] != MVOL_MAGIC:
        raise BadMagic(f"{path} does not start with MVOL magic bytes")
    if len(raw) < MVOL_HEADER.size:
        raise TruncatedFile(f"{path} header is {len(raw)} bytes, expected {MVOL_HEADER.size}")

    _, dtype_code, nx, ny, nz, sx, sy, sz = MVOL_HEADER.unpack_from(raw)
    if dtype_code == DTYPE_SCALAR:
        np_dtype = np.dtype('<f4')
    elif dtype_code == DTYPE_LABEL:
        np_dtype = np.dtype('u1')
    else:
        raise UnknownDtype(f"{path} declares unknown dtype code {dtype_code}")

    count = nx * ny * nz
    payload = raw[MVOL_HEADER.size:]
    if len(payload) < count * np_dtype.itemsize:
        raise TruncatedFile(
            f"{path} promises {count} voxels but carries {len(payload) // np_dtype.itemsize}"
        )

    flat = np.frombuffer(payload, dtype=np_dtype, count=count)
    data = flat.reshape((nx, ny, nz), order='F')
    spacing = (float(sx), float(sy), float(sz))
    if dtype_code == DTYPE_SCALAR:
        return ScalarVolume(data, spacing)
    return LabelVolume(data, spacing)


def encode_mvol(volume: Union[ScalarVolume, LabelVolume]) -> bytes:
    """Serialize a volume to MVOL bytes."""
    if isinstance(volume, ScalarVolume):
        dtype_code, np_dtype = DTYPE_SCALAR, np.dtype('<f4')
    elif isinstance(volume, LabelVolume):
        dtype_code, np_dtype = DTYPE_LABEL, np.dtype('u1')
    else:
        raise TypeError(f"Cannot write {type(volume).__name__} as MVOL")
    nx, ny, nz = volume.dims
    header = MVOL_HEADER.pack(MVOL_MAGIC, dtype_code, nx, ny, nz, *volume.spacing)
    payload = np.asarray(volume.data, dtype=np_dtype).ravel(order='F').tobytes()
    return header + payload


@retry(
    stop=stop_after_attempt(MAX_RETRIES),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _write_bytes(path: str, content: bytes) -> None:
    with open(path, 'wb') as f:
        f.write(content)


def write_bytes(path: str, content: bytes) -> None:
    """Write an artifact, retrying transient OS errors."""
    try:
        _write_bytes(path, content)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise IoFailure(f"Failed to write {path}: {e}") from e


def write_mvol(volume: Union[ScalarVolume, LabelVolume], path: str) -> None:
    """
    Write a volume in MVOL format (bit-exact, deterministic).

    Args:
        volume: ScalarVolume or LabelVolume
        path (str): Target file
    """
    write_bytes(path, encode_mvol(volume))
    logger.debug(f"Wrote {type(volume).__name__} {volume.dims} to {path}")


def meta_path(path: str) -> str:
    """Sidecar path for a volume file: <name>.meta.json."""
    base, ext = os.path.splitext(path)
    return (base if ext == ".mvol" else path) + ".meta.json"


def read_meta(path: str, required: bool = False) -> Dict[str, Any]:
    """Read the JSON sidecar of a volume; empty dict when absent and not required."""
    sidecar = meta_path(path)
    if not os.path.exists(sidecar):
        if required:
            raise MissingSidecar(f"Missing sidecar {sidecar}")
        return {}
    with open(sidecar, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_meta(path: str, meta: Dict[str, Any]) -> None:
    """Write the JSON sidecar of a volume (sorted keys, deterministic)."""
    content = json.dumps(meta, indent=2, sort_keys=True) + "\n"
    write_bytes(meta_path(path), content.encode('utf-8'))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _check_target(out_dims: Sequence[int], out_spacing: Sequence[float]) -> Tuple[Dims, Spacing]:
    spacing = _check_geometry(out_dims, out_spacing)
    return tuple(int(n) for n in out_dims), spacing


def grid_coordinates(src_spacing: Spacing, out_dims: Dims, out_spacing: Spacing) -> np.ndarray:
    """Source voxel coordinates of every output voxel center, shape (3, *out_dims)."""
    axes = [
        np.arange(n, dtype=np.float64) * (out_sp / src_sp)
        for n, out_sp, src_sp in zip(out_dims, out_spacing, src_spacing)
    ]
    return np.stack(np.meshgrid(*axes, indexing='ij'))


def _clamped(coords: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    coords = np.array(coords, dtype=np.float64)
    for axis, n in enumerate(shape):
        np.clip(coords[axis], 0.0, n - 1, out=coords[axis])
    return coords


def sample_trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    Trilinear sampling at arbitrary voxel coordinates with clamp-to-edge.

    Args:
        data (np.ndarray): Source grid (nx, ny, nz)
        coords (np.ndarray): Coordinates (3, ...) in source voxel units

    Returns:
        np.ndarray: Sampled values shaped like coords[0]
    """
    clamped = _clamped(coords, data.shape)
    return ndimage.map_coordinates(
        np.asarray(data, dtype=np.float64), clamped, order=1, mode='nearest', prefilter=False
    )


def sample_nearest(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-neighbour sampling with clamp-to-edge; exact halves round to the lower index."""
    clamped = _clamped(coords, data.shape)
    index = tuple(np.ceil(clamped[axis] - 0.5).astype(np.intp) for axis in range(3))
    return np.asarray(data)[index]


def resample_trilinear(src: ScalarVolume, out_dims: Sequence[int], out_spacing: Sequence[float]) -> ScalarVolume:
    """
    Trilinearly resample a scalar volume onto a new grid (first-voxel-center aligned).

    Args:
        src (ScalarVolume): Source volume
        out_dims: Output voxel counts
        out_spacing: Output spacing in mm

    Returns:
        ScalarVolume: Resampled volume
    """
    dims, spacing = _check_target(out_dims, out_spacing)
    if dims == src.dims and spacing == src.spacing:
        return ScalarVolume(src.data.copy(), spacing)
    coords = grid_coordinates(src.spacing, dims, spacing)
    return ScalarVolume(sample_trilinear(src.data, coords), spacing)


def resample_nearest(src: LabelVolume, out_dims: Sequence[int], out_spacing: Sequence[float]) -> LabelVolume:
    """
    Nearest-neighbour resampling of a label volume; output codes are a subset of input codes.

    Args:
        src (LabelVolume): Source labels
        out_dims: Output voxel counts
        out_spacing: Output spacing in mm

    Returns:
        LabelVolume: Resampled labels with the same schema
    """
    dims, spacing = _check_target(out_dims, out_spacing)
    if dims == src.dims and spacing == src.spacing:
        return LabelVolume(src.data.copy(), spacing, src.schema)
    coords = grid_coordinates(src.spacing, dims, spacing)
    return LabelVolume(sample_nearest(src.data, coords), spacing, src.schema)


# ---------------------------------------------------------------------------
# Channel utilities
# ---------------------------------------------------------------------------

def one_hot(labels: LabelVolume, channels: int) -> ProbVolume:
    """
    One-hot encode a label volume.

    Args:
        labels (LabelVolume): Labels with codes < channels
        channels (int): Channel count K

    Returns:
        ProbVolume: PROBS volume with exactly one 1 per voxel
    """
    codes = labels.data
    if codes.size and int(codes.max()) >= channels:
        raise CodeOutOfRange(f"Label code {int(codes.max())} does not fit K={channels}")
    data = (codes[None, ...] == np.arange(channels).reshape(-1, 1, 1, 1)).astype(np.float64)
    return ProbVolume(data, labels.spacing, ProbKind.PROBS, labels.schema)


def argmax_labels(prob: ProbVolume, schema: Optional[int] = None) -> LabelVolume:
    """Hard labels per voxel; ties go to the lowest channel index."""
    labels = np.argmax(prob.data, axis=0)
    target = schema if schema is not None else prob.schema
    if target is None:
        # stage-3 schema holds every code < 5; wider outputs stay unschematized
        from utils.hierarchy import schema_for_channels
        target = schema_for_channels(prob.channels)
    return LabelVolume(labels, prob.spacing, target)


def entropy_map(prob: ProbVolume) -> ScalarVolume:
    """
    Per-voxel Shannon entropy (nats) of a probability volume, 0*ln 0 := 0.

    Args:
        prob (ProbVolume): PROBS volume

    Returns:
        ScalarVolume: Entropy in [0, ln K]
    """
    if prob.kind != ProbKind.PROBS:
        raise NotProbabilities("entropy_map needs a PROBS volume")
    q = np.clip(prob.data, 0.0, 1.0)
    return ScalarVolume(special.entr(q).sum(axis=0), prob.spacing)
