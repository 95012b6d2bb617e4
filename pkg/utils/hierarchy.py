"""
Label hierarchy: per-stage schemas, ground-truth collapse, MVO presence and
subgroup routing of final predictions.

Codes are fixed across the repo: BG=0, LV=1, MYO=2, MIT=3, MVO=4. The
composite labels reuse the code of their first member: f-MYO=2 in the
stage-1 schema, f-MIT=3 in the stage-2 schema.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Tuple

import numpy as np

from utils.errors import CodeOutOfRange, GeometryMismatch, NotProbabilities, SchemaMismatch, UnknownCode
from utils.volume import LabelVolume, ProbKind, ProbVolume, argmax_labels, same_geometry

logger = logging.getLogger(__name__)

BG, LV, MYO, MIT, MVO = 0, 1, 2, 3, 4
F_MYO = MYO
F_MIT = MIT

STAGE3_LABEL_NAMES = ("BG", "LV", "MYO", "MIT", "MVO")
FOREGROUND_LABELS = ("LV", "MYO", "MIT", "MVO")


@dataclass(frozen=True)
class LabelSchema:
    stage: int
    names: Tuple[str, ...]

    @property
    def num_labels(self) -> int:
        return len(self.names)


SCHEMAS: Dict[int, LabelSchema] = {
    1: LabelSchema(1, ("BG", "LV", "f-MYO")),
    2: LabelSchema(2, ("BG", "LV", "MYO", "f-MIT")),
    3: LabelSchema(3, STAGE3_LABEL_NAMES),
}

# stage-3 code -> stage code
_COLLAPSE = {
    1: np.array([BG, LV, F_MYO, F_MYO, F_MYO], dtype=np.uint8),
    2: np.array([BG, LV, MYO, F_MIT, F_MIT], dtype=np.uint8),
    3: np.array([BG, LV, MYO, MIT, MVO], dtype=np.uint8),
}

# stage-2 code -> stage-1 code
STAGE2_TO_STAGE1 = np.array([BG, LV, F_MYO, F_MYO], dtype=np.uint8)


class Subgroup(str, Enum):
    D8 = "D8"
    M1 = "M1"
    M12 = "M12"

    @classmethod
    def parse(cls, value) -> "Subgroup":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"Unknown subgroup '{value}', expected D8, M1 or M12") from None


def num_labels(stage: int) -> int:
    return SCHEMAS[stage].num_labels


def schema_for_channels(channels: int) -> int:
    """Schema stage whose label count is `channels`; narrower outputs use stage-3 codes."""
    for stage, schema in SCHEMAS.items():
        if schema.num_labels == channels:
            return stage
    if channels < num_labels(1):
        return 3
    raise CodeOutOfRange(f"No label schema with {channels} labels")


def collapse_to_stage(y: LabelVolume, stage: int) -> LabelVolume:
    """
    Collapse stage-3 ground truth to the label definition of a cascade stage.

    Args:
        y (LabelVolume): Stage-3 labels
        stage (int): Target stage 1, 2 or 3

    Returns:
        LabelVolume: Labels in the target stage schema
    """
    if stage not in SCHEMAS:
        raise SchemaMismatch(f"Unknown stage {stage}")
    if y.schema != 3:
        raise SchemaMismatch(f"collapse_to_stage needs stage-3 labels, got stage-{y.schema}")
    if y.data.size and int(y.data.max()) >= num_labels(3):
        raise UnknownCode(f"Label code {int(y.data.max())} is not a stage-3 code")
    if stage == 3:
        return y
    return LabelVolume(_COLLAPSE[stage][y.data], y.spacing, stage)


def parent_code(codes: np.ndarray, stage: int) -> np.ndarray:
    """Map codes of `stage` to the parent stage (2 -> 1, 3 -> 2)."""
    if stage == 2:
        return STAGE2_TO_STAGE1[codes]
    if stage == 3:
        return _COLLAPSE[2][codes]
    raise SchemaMismatch(f"Stage {stage} has no parent stage")


def contains_mvo(y: LabelVolume) -> bool:
    """True iff any voxel of stage-3 labels carries MVO."""
    if y.schema != 3:
        raise SchemaMismatch(f"contains_mvo needs stage-3 labels, got stage-{y.schema}")
    return bool(np.any(y.data == MVO))


def select_final(y2: ProbVolume, y3: ProbVolume, subgroup: Subgroup) -> ProbVolume:
    """
    Route stage predictions to the final prediction by subgroup.

    D8 cases use the stage-3 prediction, M1 and M12 cases the stage-2 one.

    Args:
        y2 (ProbVolume): Stage-2 probabilities (K=4)
        y3 (ProbVolume): Stage-3 probabilities (K=5)
        subgroup (Subgroup): Acquisition subgroup

    Returns:
        ProbVolume: Routed prediction annotated with its schema
    """
    if y2.kind != ProbKind.PROBS or y3.kind != ProbKind.PROBS:
        raise NotProbabilities("select_final routes PROBS volumes")
    if not same_geometry(y2, y3):
        raise GeometryMismatch(f"Stage predictions differ in geometry: {y2.dims} vs {y3.dims}")
    if y2.channels != num_labels(2) or y3.channels != num_labels(3):
        raise SchemaMismatch(f"Expected 4 and 5 channels, got {y2.channels} and {y3.channels}")

    subgroup = Subgroup.parse(subgroup)
    if subgroup == Subgroup.D8:
        chosen, stage = y3, 3
    else:
        chosen, stage = y2, 2
    if chosen.schema == stage:
        return chosen
    return ProbVolume(chosen.data, chosen.spacing, chosen.kind, stage)


def to_stage3_labels(labels: LabelVolume) -> LabelVolume:
    """Express hard labels of any stage in stage-3 codes (f-MIT reports as MIT, f-MYO as MYO)."""
    if labels.schema == 3:
        return labels
    # composite codes coincide with the code of their first member
    return labels.with_data(labels.data, schema=3)


def final_labels(prob: ProbVolume) -> LabelVolume:
    """Hard stage-3 labels of a routed prediction."""
    return to_stage3_labels(argmax_labels(prob))
