import pandas as pd
import pytest

from pages import get_page_list, get_page_module
from pages.reports import bland_altman_frame


def test_bland_altman_frame():
    cases = pd.DataFrame({
        "case_id": ["a", "a", "b"],
        "label": ["LV", "MYO", "LV"],
        "pred_volume_ml": [12.0, 5.0, 19.0],
        "gt_volume_ml": [10.0, 5.0, 20.0],
    })
    frame = bland_altman_frame(cases, "LV")
    assert list(frame["case_id"]) == ["a", "b"]
    assert list(frame["mean_ml"]) == pytest.approx([11.0, 19.5])
    assert list(frame["diff_ml"]) == pytest.approx([2.0, -1.0])


def test_page_registry():
    assert get_page_list() == ["Reports", "Volumes"]
    assert get_page_module("Reports").render is not None
    assert get_page_module("Settings") is None
