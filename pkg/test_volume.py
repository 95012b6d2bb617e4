import os

import numpy as np
import pytest

from conftest import loop_trilinear
from utils.errors import BadMagic, CodeOutOfRange, NotProbabilities, TruncatedFile, UnknownDtype
from utils.volume import (
    MVOL_HEADER, LabelVolume, ProbKind, ProbVolume, ScalarVolume, argmax_labels, encode_mvol,
    entropy_map, one_hot, read_meta, read_mvol, resample_nearest, resample_trilinear, write_meta, write_mvol,
)


def test_scalar_roundtrip_is_exact(tmp_path):
    vol = ScalarVolume(np.full((2, 2, 2), 3.5), (1.0, 1.5, 2.0))
    path = str(tmp_path / "a.mvol")
    write_mvol(vol, path)
    back = read_mvol(path)
    assert isinstance(back, ScalarVolume)
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing


def test_payload_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape((2, 3, 4), order="F") % 5
    path = str(tmp_path / "l.mvol")
    write_mvol(LabelVolume(data, (1.0, 1.0, 1.0)), path)
    raw = open(path, "rb").read()
    assert list(raw[MVOL_HEADER.size:MVOL_HEADER.size + 4]) == [0, 1, 2, 3]


def test_single_label_voxel_file_size(tmp_path):
    path = str(tmp_path / "one.mvol")
    write_mvol(LabelVolume(np.full((1, 1, 1), 4), (1.0, 1.0, 1.0)), path)
    assert os.path.getsize(path) == 32


def test_writes_are_deterministic(tmp_path):
    vol = LabelVolume(np.random.default_rng(0).integers(0, 5, (4, 3, 2)), (1.2, 1.2, 6.0))
    a, b = str(tmp_path / "a.mvol"), str(tmp_path / "b.mvol")
    write_mvol(vol, a)
    write_mvol(vol, b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.mvol"
    path.write_bytes(b"NOPE!!" + b"\x00" * 40)
    with pytest.raises(BadMagic):
        read_mvol(str(path))


def test_truncated_payload(tmp_path):
    content = encode_mvol(LabelVolume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)))
    path = tmp_path / "short.mvol"
    path.write_bytes(content[:-4])
    with pytest.raises(TruncatedFile):
        read_mvol(str(path))


def test_unknown_dtype(tmp_path):
    content = bytearray(encode_mvol(LabelVolume(np.zeros((1, 1, 1)), (1.0, 1.0, 1.0))))
    content[6] = 9
    path = tmp_path / "dtype.mvol"
    path.write_bytes(bytes(content))
    with pytest.raises(UnknownDtype):
        read_mvol(str(path))


def test_sidecar_roundtrip(tmp_path):
    path = str(tmp_path / "case_gt.mvol")
    write_meta(path, {"case_id": "case_000", "subgroup": "D8"})
    assert os.path.exists(str(tmp_path / "case_gt.meta.json"))
    assert read_meta(path)["subgroup"] == "D8"
    assert read_meta(str(tmp_path / "other.mvol")) == {}


def test_label_codes_must_fit_schema():
    with pytest.raises(CodeOutOfRange):
        LabelVolume(np.full((1, 1, 1), 4), (1.0, 1.0, 1.0), schema=2)


def test_identity_resample_is_bit_exact():
    vol = ScalarVolume(np.random.default_rng(1).normal(size=(5, 4, 3)), (1.0, 2.0, 3.0))
    out = resample_trilinear(vol, vol.dims, vol.spacing)
    assert out.data.tobytes() == vol.data.tobytes()
    labels = LabelVolume(np.random.default_rng(1).integers(0, 5, (5, 4, 3)), (1.0, 2.0, 3.0))
    assert np.array_equal(resample_nearest(labels, labels.dims, labels.spacing).data, labels.data)


def test_trilinear_upsampling_matches_loop_oracle():
    data = np.random.default_rng(2).normal(size=(4, 4, 4))
    src = ScalarVolume(data, (2.0, 2.0, 2.0))
    out = resample_trilinear(src, (8, 8, 8), (1.0, 1.0, 1.0))
    stored = src.data.astype(np.float64)
    for i in range(8):
        for j in range(8):
            for k in range(8):
                expected = loop_trilinear(stored, (i * 0.5, j * 0.5, k * 0.5))
                assert abs(float(out.data[i, j, k]) - expected) < 1e-5


def test_nearest_keeps_code_subset():
    labels = LabelVolume(np.random.default_rng(3).choice([0, 2, 4], size=(6, 6, 3)), (1.0, 1.0, 3.0))
    out = resample_nearest(labels, (9, 9, 7), (0.7, 0.7, 1.2))
    assert set(np.unique(out.data)) <= {0, 2, 4}


def test_one_hot_single_voxel():
    prob = one_hot(LabelVolume(np.full((1, 1, 1), 2), (1.0, 1.0, 1.0)), 5)
    assert prob.data[:, 0, 0, 0].tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_argmax_and_tie_break():
    scores = np.array([0.1, 0.7, 0.2]).reshape(3, 1, 1, 1)
    assert argmax_labels(ProbVolume(scores, (1.0, 1.0, 1.0))).data[0, 0, 0] == 1
    tie = np.array([0.5, 0.5]).reshape(2, 1, 1, 1)
    assert argmax_labels(ProbVolume(tie, (1.0, 1.0, 1.0))).data[0, 0, 0] == 0


def test_entropy_values():
    spacing = (1.0, 1.0, 1.0)
    uniform = ProbVolume(np.full((4, 1, 1, 1), 0.25), spacing)
    half = ProbVolume(np.full((2, 1, 1, 1), 0.5), spacing)
    certain = ProbVolume(np.array([0.0, 1.0]).reshape(2, 1, 1, 1), spacing)
    assert entropy_map(uniform).data[0, 0, 0] == pytest.approx(np.log(4), abs=1e-6)
    assert entropy_map(half).data[0, 0, 0] == pytest.approx(np.log(2), abs=1e-6)
    assert entropy_map(certain).data[0, 0, 0] == 0.0


def test_probs_must_sum_to_one():
    with pytest.raises(NotProbabilities):
        ProbVolume(np.full((2, 1, 1, 1), 0.6), (1.0, 1.0, 1.0), ProbKind.PROBS)
