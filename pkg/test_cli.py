import json
import os
import subprocess
import sys

import numpy as np
import pytest

from careseg import main
from config.settings import load_config
from utils.hierarchy import LV, MYO
from utils.volume import LabelVolume, ScalarVolume, read_meta, read_mvol, write_meta, write_mvol


def test_config_command_writes_a_loadable_preset(tmp_path):
    out = str(tmp_path / "full.json")
    assert main(["config", "--preset", "full", "--out", out]) == 0
    cfg = load_config(out)
    assert cfg.preset == "full"
    assert cfg.grid.dims == (128, 128, 128)
    assert cfg.ensemble.size == 10


def test_phantom_gen(tmp_path):
    out = str(tmp_path / "corpus")
    assert main(["phantom-gen", "--count", "3", "--out", out, "--seed", "1"]) == 0
    assert os.path.exists(os.path.join(out, "corpus.csv"))
    assert os.path.exists(os.path.join(out, "case_002_gt.mvol"))


def test_postprocess_command(tmp_path):
    data = np.zeros((12, 12, 4), dtype=np.uint8)
    data[2:8, 2:8, :] = MYO
    data[4:6, 4:6, :] = LV
    data[11, 11, 0] = MYO
    src, out = str(tmp_path / "raw.mvol"), str(tmp_path / "clean.mvol")
    write_mvol(LabelVolume(data, (1.5, 1.5, 6.0)), src)
    write_meta(src, {"case_id": "case_000"})

    assert main(["postprocess", "--in", src, "--out", out, "--skip-outliers", "--base-at", "zmax"]) == 0
    cleaned = read_mvol(out)
    assert cleaned.data[11, 11, 0] == 0
    assert np.count_nonzero(cleaned.data) == 36 * 4
    meta = read_meta(out)
    assert meta["postprocessed"] is True and meta["case_id"] == "case_000"


def test_overlay_command(tmp_path):
    image = ScalarVolume(np.random.default_rng(0).normal(size=(6, 6, 3)), (1.0, 1.0, 2.0))
    labels = LabelVolume(np.random.default_rng(1).integers(0, 5, (6, 6, 3)), (1.0, 1.0, 2.0))
    img_path, lab_path = str(tmp_path / "img.mvol"), str(tmp_path / "lab.mvol")
    write_mvol(image, img_path)
    write_mvol(labels, lab_path)
    out = str(tmp_path / "png")
    assert main(["overlay", "--img", img_path, "--labels", lab_path, "--out", out]) == 0
    assert sorted(os.listdir(out)) == ["slice_000.png", "slice_001.png", "slice_002.png"]


def test_domain_errors_exit_with_two(tmp_path):
    bogus = tmp_path / "bogus.mvol"
    bogus.write_bytes(b"not a volume at all, just text")
    assert main(["postprocess", "--in", str(bogus), "--out", str(tmp_path / "o.mvol")]) == 2

    bad_config = tmp_path / "bad.json"
    bad_config.write_text(json.dumps({"grid": {"voxels": 3}}))
    assert main(["phantom-gen", "--count", "2", "--out", str(tmp_path / "c"), "--config", str(bad_config)]) == 2


def test_predict_needs_a_subgroup(tmp_path):
    image = str(tmp_path / "img.mvol")
    write_mvol(ScalarVolume(np.zeros((4, 4, 4)), (1.0, 1.0, 1.0)), image)
    code = main(["predict", "--models", str(tmp_path), "--in", image, "--out", str(tmp_path / "p.mvol")])
    assert code == 2


def test_unexpected_failures_exit_with_one(tmp_path):
    assert main(["postprocess", "--in", str(tmp_path / "missing.mvol"), "--out", str(tmp_path / "o.mvol")]) == 1


@pytest.mark.parametrize("module", ["careseg", "app", "config.settings", "network.cascade", "services.inference_service"])
def test_entry_points_import_in_a_fresh_interpreter(module):
    root = os.path.dirname(os.path.abspath(__file__))
    result = subprocess.run(
        [sys.executable, "-c", f"import {module}"], cwd=root, capture_output=True, text=True, timeout=120,
    )
    assert result.returncode == 0, result.stderr
