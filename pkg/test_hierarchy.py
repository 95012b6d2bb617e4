import numpy as np
import pytest

from utils.errors import SchemaMismatch
from utils.hierarchy import (
    BG, LV, MIT, MVO, MYO, STAGE2_TO_STAGE1, Subgroup, collapse_to_stage, contains_mvo,
    final_labels, parent_code, select_final, to_stage3_labels,
)
from utils.volume import LabelVolume, ProbKind, ProbVolume

SPACING = (1.0, 1.0, 1.0)


def _labels(codes):
    return LabelVolume(np.asarray(codes, dtype=np.uint8).reshape(-1, 1, 1), SPACING)


def _random_probs(rng, k, dims=(2, 2, 2)):
    logits = rng.normal(size=(k,) + dims)
    e = np.exp(logits)
    return ProbVolume(e / e.sum(axis=0), SPACING, ProbKind.PROBS)


def test_collapse_maps_each_stage():
    y = _labels([BG, LV, MYO, MIT, MVO])
    assert collapse_to_stage(y, 2).data.ravel().tolist() == [0, 1, 2, 3, 3]
    assert collapse_to_stage(y, 1).data.ravel().tolist() == [0, 1, 2, 2, 2]
    assert collapse_to_stage(y, 3) is y


def test_collapse_is_consistent_across_stages():
    y = LabelVolume(np.random.default_rng(0).integers(0, 5, (6, 5, 4)), SPACING)
    via_stage2 = STAGE2_TO_STAGE1[collapse_to_stage(y, 2).data]
    assert np.array_equal(via_stage2, collapse_to_stage(y, 1).data)
    assert np.array_equal(parent_code(collapse_to_stage(y, 2).data, 2), collapse_to_stage(y, 1).data)


def test_collapse_rejects_non_stage3_input():
    with pytest.raises(SchemaMismatch):
        collapse_to_stage(LabelVolume(np.zeros((1, 1, 1)), SPACING, schema=2), 1)


def test_contains_mvo():
    assert not contains_mvo(_labels([BG, BG]))
    assert contains_mvo(_labels([BG, MVO]))
    assert not contains_mvo(_labels([MIT, MYO]))


@pytest.mark.parametrize("subgroup,channels", [("M1", 4), ("M12", 4), ("D8", 5)])
def test_select_final_routes_by_subgroup(subgroup, channels):
    rng = np.random.default_rng(1)
    y2, y3 = _random_probs(rng, 4), _random_probs(rng, 5)
    out = select_final(y2, y3, Subgroup.parse(subgroup))
    assert out.channels == channels
    if channels == 4:
        assert np.array_equal(out.data, y2.data)
        assert out.schema == 2


def test_subgroup_parse():
    assert Subgroup.parse("d8") is Subgroup.D8
    assert Subgroup.parse(Subgroup.M12) is Subgroup.M12
    with pytest.raises(ValueError):
        Subgroup.parse("M6")


def test_stage2_labels_read_as_stage3():
    y = LabelVolume(np.array([0, 1, 2, 3]).reshape(4, 1, 1), SPACING, schema=2)
    out = to_stage3_labels(y)
    assert out.schema == 3
    assert out.data.ravel().tolist() == [0, 1, 2, 3]


def test_final_labels_of_a_stage2_prediction():
    probs = np.zeros((4, 3, 1, 1))
    probs[BG, 0], probs[LV, 1], probs[MIT, 2] = 1.0, 1.0, 1.0
    out = final_labels(ProbVolume(probs, SPACING, ProbKind.PROBS, schema=2))
    assert out.schema == 3
    assert out.data.ravel().tolist() == [BG, LV, MIT]
