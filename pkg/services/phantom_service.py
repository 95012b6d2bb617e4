"""
Synthetic LGE-like phantoms with nested labels, and corpus generation.

A phantom is a truncated ellipsoidal left ventricle (bright blood pool)
inside a myocardial wall (dark), with a bright transmural infarct wedge and,
for some acute (D8) cases, a dark microvascular-obstruction core inside the
infarct. The long axis runs along z with the base at the high-z end.
"""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from config.settings import CorpusConfig
from utils.errors import InvalidSpec
from utils.export_helpers import export_to_csv, write_text
from utils.hierarchy import BG, LV, MIT, MVO, MYO, Subgroup
from utils.volume import LabelVolume, ScalarVolume, write_meta, write_mvol

logger = logging.getLogger(__name__)

MANIFEST_NAME = "corpus.csv"

# mean intensity per tissue class, indexed by label code
TISSUE_INTENSITY = np.array([0.35, 0.9, 0.1, 0.8, 0.15])


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    subgroup: Subgroup
    lv_radii: Tuple[float, float, float] = (12.0, 12.0, 26.0)
    wall_thickness: float = 9.0
    mit_extent: float = 1.4
    mvo_radius: float = 0.0
    noise_std: float = 0.08
    dims: Tuple[int, int, int] = (40, 40, 11)
    spacing: Tuple[float, float, float] = (1.6, 1.6, 6.0)

    def validate(self) -> None:
        problems = []
        if any(r <= 0 for r in self.lv_radii):
            problems.append("LV radii must be positive")
        if self.wall_thickness <= 0:
            problems.append("wall thickness must be positive")
        if not 0 < self.mit_extent <= 2 * np.pi:
            problems.append("infarct extent must lie in (0, 2*pi]")
        if self.mvo_radius < 0:
            problems.append("MVO radius must be non-negative")
        if self.mvo_radius > 0 and Subgroup.parse(self.subgroup) != Subgroup.D8:
            problems.append("only D8 phantoms may carry MVO")
        if self.noise_std < 0:
            problems.append("noise std must be non-negative")
        if any(n < 1 for n in self.dims) or any(s <= 0 for s in self.spacing):
            problems.append("grid must have positive dims and spacing")
        if problems:
            raise InvalidSpec("; ".join(problems))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["subgroup"] = Subgroup.parse(self.subgroup).value
        return data


def native_dims(fov_mm: float, spacing: Tuple[float, float, float]) -> Tuple[int, int, int]:
    """Voxel counts covering a cubic field of view."""
    return tuple(max(1, int(round(fov_mm / s))) for s in spacing)


def random_spec(
    seed: int,
    subgroup: Subgroup,
    with_mvo: bool,
    cfg: CorpusConfig = CorpusConfig(),
    fov_mm: float = 64.0,
) -> PhantomSpec:
    """Draw plausible phantom geometry for one case."""
    rng = np.random.default_rng([seed, 1])
    return PhantomSpec(
        seed=seed,
        subgroup=Subgroup.parse(subgroup),
        lv_radii=(float(rng.uniform(10.0, 13.0)), float(rng.uniform(10.0, 13.0)), float(rng.uniform(22.0, 28.0))),
        wall_thickness=float(rng.uniform(8.0, 10.0)),
        mit_extent=float(rng.uniform(0.9, 1.8)),
        mvo_radius=float(rng.uniform(5.0, 7.0)) if with_mvo else 0.0,
        noise_std=cfg.noise_std,
        dims=native_dims(fov_mm, cfg.native_spacing),
        spacing=tuple(cfg.native_spacing),
    )


def generate_phantom(spec: PhantomSpec) -> Tuple[ScalarVolume, LabelVolume, Subgroup]:
    """
    Render one phantom.

    Args:
        spec (PhantomSpec): Geometry, noise and subgroup

    Returns:
        tuple: (image, stage-3 labels, subgroup)
    """
    spec.validate()
    subgroup = Subgroup.parse(spec.subgroup)
    rng = np.random.default_rng([spec.seed, 2])

    spacing = np.asarray(spec.spacing, dtype=np.float64)
    extent = (np.asarray(spec.dims) - 1) * spacing
    axes = [np.arange(n) * s for n, s in zip(spec.dims, spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")

    rx, ry, rz = spec.lv_radii
    t = spec.wall_thickness
    cx, cy = extent[0] / 2 + rng.uniform(-3, 3), extent[1] / 2 + rng.uniform(-3, 3)
    # base plane sits a little below the top of the field of view, apex hangs below it
    base_z = min(extent[2] - spacing[2], rz + t + spacing[2] + rng.uniform(0, spacing[2]))

    inner = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - base_z) / rz) ** 2
    outer = ((x - cx) / (rx + t)) ** 2 + ((y - cy) / (ry + t)) ** 2 + ((z - base_z) / (rz + t)) ** 2
    below_base = z <= base_z
    lv = (inner <= 1.0) & below_base
    wall = (outer <= 1.0) & below_base & ~lv

    labels = np.full(spec.dims, BG, dtype=np.uint8)
    labels[lv] = LV
    labels[wall] = MYO

    angle = np.arctan2(y - cy, x - cx)
    mit_center = rng.uniform(-np.pi, np.pi)
    offset = np.abs(np.angle(np.exp(1j * (angle - mit_center))))
    mit = wall & (offset <= spec.mit_extent / 2)
    labels[mit] = MIT

    if spec.mvo_radius > 0:
        # core centred mid-wall in the middle of the wedge, on a slice centre
        mid_r = 0.5 * (rx + (rx + t)), 0.5 * (ry + (ry + t))
        kz = int(round((base_z - 0.45 * rz) / spacing[2]))
        core_z = kz * spacing[2]
        shrink = np.sqrt(max(0.0, 1.0 - ((core_z - base_z) / (rz + t / 2)) ** 2))
        core = np.array([
            cx + mid_r[0] * shrink * np.cos(mit_center),
            cy + mid_r[1] * shrink * np.sin(mit_center),
            core_z,
        ])
        ball = (x - core[0]) ** 2 + (y - core[1]) ** 2 + (z - core[2]) ** 2 <= spec.mvo_radius ** 2
        # MVO stays surrounded by infarct
        inside = ndimage.binary_erosion(mit, structure=ndimage.generate_binary_structure(3, 1))
        labels[ball & inside] = MVO

    image = TISSUE_INTENSITY[labels] + rng.normal(0.0, spec.noise_std, spec.dims)
    return ScalarVolume(image, spec.spacing), LabelVolume(labels, spec.spacing), subgroup


def _assign_cases(cfg: CorpusConfig) -> List[Tuple[str, Subgroup, bool, str]]:
    """(case_id, subgroup, has_mvo, split) per case, seeded."""
    rng = np.random.default_rng([cfg.seed, 0])
    n = cfg.count
    n_d8 = max(1, int(round(n * cfg.d8_fraction)))
    n_mvo = int(round(n_d8 * cfg.mvo_fraction))
    subgroups = [Subgroup.D8] * n_d8 + [Subgroup.M1 if i % 2 == 0 else Subgroup.M12 for i in range(n - n_d8)]
    has_mvo = [i < n_mvo for i in range(n_d8)] + [False] * (n - n_d8)
    order = rng.permutation(n)
    subgroups = [subgroups[i] for i in order]
    has_mvo = [has_mvo[i] for i in order]

    n_train = int(round(n * cfg.train_fraction))
    # stratify the split by MVO presence so both sides see MVO
    split = [""] * n
    for flag in (True, False):
        members = [i for i in range(n) if has_mvo[i] == flag]
        members = [members[i] for i in rng.permutation(len(members))]
        cut = int(round(len(members) * n_train / n))
        for rank, i in enumerate(members):
            split[i] = "train" if rank < cut else "test"
    return [(f"case_{i:03d}", subgroups[i], has_mvo[i], split[i]) for i in range(n)]


def case_paths(corpus_dir: str, case_id: str) -> Dict[str, str]:
    return {
        "img": os.path.join(corpus_dir, f"{case_id}_img.mvol"),
        "gt": os.path.join(corpus_dir, f"{case_id}_gt.mvol"),
    }


def generate_corpus(out_dir: str, cfg: CorpusConfig = CorpusConfig(), progress: bool = True) -> pd.DataFrame:
    """
    Generate a phantom corpus with a seeded 2:1 train/test split.

    Writes <case>_img.mvol, <case>_gt.mvol (with sidecars) and corpus.csv.

    Args:
        out_dir (str): Target directory
        cfg (CorpusConfig): Corpus size, fractions, seed and native grid
        progress (bool): Show a progress bar

    Returns:
        pd.DataFrame: The manifest (case_id, subgroup, has_mvo, split)
    """
    if cfg.count < 2:
        raise InvalidSpec("A corpus needs at least two cases")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    try:
        for index, (case_id, subgroup, has_mvo, split) in enumerate(
            tqdm(_assign_cases(cfg), desc="phantoms", disable=not progress)
        ):
            spec = random_spec(cfg.seed * 100003 + index, subgroup, has_mvo, cfg)
            image, labels, _ = generate_phantom(spec)
            paths = case_paths(out_dir, case_id)
            write_mvol(image, paths["img"])
            write_mvol(labels, paths["gt"])
            meta = {"case_id": case_id, "subgroup": subgroup.value, "spec": spec.to_dict()}
            write_meta(paths["img"], meta)
            write_meta(paths["gt"], meta)
            rows.append({
                "case_id": case_id,
                "subgroup": subgroup.value,
                "has_mvo": bool(np.any(labels.data == MVO)),
                "split": split,
            })
    except Exception as e:
        logger.error(f"Error generating corpus in {out_dir}: {e}", exc_info=True)
        raise

    manifest = pd.DataFrame(rows, columns=["case_id", "subgroup", "has_mvo", "split"])
    write_text(os.path.join(out_dir, MANIFEST_NAME), export_to_csv(manifest))
    logger.info(
        f"Generated {len(manifest)} phantoms in {out_dir} "
        f"({int(manifest['has_mvo'].sum())} with MVO, {int((manifest['split'] == 'train').sum())} train)"
    )
    return manifest


def load_manifest(corpus_dir: str, split: Optional[str] = None) -> pd.DataFrame:
    manifest = pd.read_csv(os.path.join(corpus_dir, MANIFEST_NAME), dtype={"case_id": str, "subgroup": str})
    manifest["has_mvo"] = manifest["has_mvo"].astype(str).str.lower() == "true"
    if split is not None:
        manifest = manifest[manifest["split"] == split].reset_index(drop=True)
    return manifest
