import numpy as np
import pytest

from conftest import brute_force_surface
from utils.errors import TooFewCases, ZeroVariance
from utils.hierarchy import LV, MIT, MVO, MYO
from utils.metrics import (
    MEAN_ROW, CaseMetrics, LabelMetrics, build_report, cohort_volume_stats, compare_reports, dice,
    ensemble_crps, evaluate_case, limits_of_agreement, pearson_cc, rank_reports, surface_distances, volume_ml,
)
from utils.volume import LabelVolume


def _mask(dims, *points):
    m = np.zeros(dims, dtype=bool)
    for p in points:
        m[p] = True
    return m


def test_dice_values():
    empty = np.zeros((3, 3, 3), dtype=bool)
    assert dice(empty, empty) == 100.0
    assert dice(_mask((3, 3, 3), (0, 0, 0)), _mask((3, 3, 3), (2, 2, 2))) == 0.0
    assert dice(_mask((3, 3, 3), (0, 0, 0), (0, 0, 1)), _mask((3, 3, 3), (0, 0, 0))) == pytest.approx(66.6667, abs=1e-4)


def test_single_voxel_distances():
    hd, assd = surface_distances(_mask((3, 3, 3), (0, 0, 0)), _mask((3, 3, 3), (1, 1, 0)), (1.0, 1.0, 1.0))
    assert hd == pytest.approx(np.sqrt(2))
    assert assd == pytest.approx(np.sqrt(2))


def test_distances_are_undefined_for_empty_masks():
    assert surface_distances(np.zeros((2, 2, 2)), _mask((2, 2, 2), (0, 0, 0)), (1.0, 1.0, 1.0)) == (None, None)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_distances_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in rng.integers(4, 13, 3))
    spacing = (1.0, 1.5, 2.0)
    pred = rng.random(dims) < 0.3
    gt = rng.random(dims) < 0.3
    hd, assd = surface_distances(pred, gt, spacing)
    expected_hd, expected_assd = brute_force_surface(pred, gt, spacing)
    assert hd == pytest.approx(expected_hd, abs=1e-9)
    assert assd == pytest.approx(expected_assd, abs=1e-9)


def test_hd95_does_not_exceed_hd():
    rng = np.random.default_rng(3)
    pred, gt = rng.random((10, 10, 6)) < 0.3, rng.random((10, 10, 6)) < 0.3
    hd, _ = surface_distances(pred, gt, (1.0, 1.0, 1.0))
    hd95, _ = surface_distances(pred, gt, (1.0, 1.0, 1.0), hd_percentile=95.0)
    assert hd95 <= hd


def test_volume_ml():
    assert volume_ml(np.ones((10, 10, 10)), (1.0, 1.0, 1.0)) == pytest.approx(1.0)
    assert volume_ml(np.ones((10, 10, 1)), (1.25, 1.25, 8.0)) == pytest.approx(1.25)


def test_volume_agreement_fixtures():
    cc, mae, loa, crps = cohort_volume_stats([(10.0, 12.0), (20.0, 19.0)])
    assert cc == pytest.approx(1.0)
    assert mae == pytest.approx(1.5)
    assert loa == pytest.approx(4.1578, abs=1e-4)
    assert crps == pytest.approx(1.5)
    assert ensemble_crps([0.0, 2.0], 1.0) == pytest.approx(0.5)


def test_perfect_volume_agreement():
    cc, mae, loa, crps = cohort_volume_stats([(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)])
    assert cc == pytest.approx(1.0)
    assert mae == loa == crps == 0.0


def test_undefined_volume_statistics():
    with pytest.raises(TooFewCases):
        pearson_cc([1.0], [1.0])
    with pytest.raises(ZeroVariance):
        pearson_cc([2.0, 2.0], [1.0, 3.0])
    with pytest.raises(TooFewCases):
        limits_of_agreement([1.0], [2.0])


def _case(case_id, shift=0):
    gt = np.zeros((10, 10, 4), dtype=np.uint8)
    gt[2:8, 2:8, :] = MYO
    gt[4:6, 4:6, :] = LV
    gt[2:4, 2:8, 1:3] = MIT
    pred = np.roll(gt, shift, axis=0)
    spacing = (1.0, 1.0, 2.0)
    return evaluate_case(LabelVolume(pred, spacing), LabelVolume(gt, spacing), case_id)


def test_case_metrics_for_a_perfect_prediction():
    metrics = _case("case_000")
    assert metrics.labels["MYO"].dsc == 100.0
    assert metrics.labels["MYO"].hd == 0.0
    assert metrics.labels["MVO"].dsc == 100.0
    assert metrics.labels["MVO"].hd is None
    assert metrics.labels["LV"].gt_volume_ml == pytest.approx(16 * 2.0 / 1000.0)


def test_stage2_predictions_are_scored_in_stage3_codes():
    gt = np.zeros((4, 4, 2), dtype=np.uint8)
    gt[1:3, 1:3, :] = MIT
    gt[1, 1, 0] = MVO
    pred = np.where(gt == MVO, MIT, gt).astype(np.uint8)
    metrics = evaluate_case(LabelVolume(pred, (1.0, 1.0, 1.0), schema=2), LabelVolume(gt, (1.0, 1.0, 1.0)), "c")
    assert metrics.labels["MIT"].dsc < 100.0
    assert metrics.labels["MVO"].dsc == 0.0


def test_single_case_report():
    report = build_report([_case("case_000", shift=1)])
    assert report.num_cases == 1
    assert report.summary.loc["MYO", "dsc_std"] == 0.0
    assert np.isnan(report.summary.loc["MYO", "cc"])
    assert report.undefined["MYO"]["cc"] == 1
    assert report.undefined["MVO"]["hd"] == 1
    assert MEAN_ROW in report.summary.index


def test_report_means_and_sample_std():
    def case(case_id, dsc):
        labels = {name: LabelMetrics(dsc, 1.0, 0.5, 1.0, 1.0) for name in ("LV", "MYO", "MIT", "MVO")}
        return CaseMetrics(case_id, labels)

    report = build_report([case("a", 80.0), case("b", 90.0), case("c", 100.0)])
    assert report.summary.loc["LV", "dsc_mean"] == pytest.approx(90.0)
    assert report.summary.loc["LV", "dsc_std"] == pytest.approx(10.0)
    assert report.summary.loc[MEAN_ROW, "dsc_mean"] == pytest.approx(90.0)
    assert report.undefined["LV"]["cc"] == 1
    assert report.summary.loc["LV", "mae"] == 0.0
    assert set(report.to_dict()["labels"]) == {"LV", "MYO", "MIT", "MVO", MEAN_ROW}


def test_member_volumes_feed_the_crps():
    labels = {name: LabelMetrics(100.0, 0.0, 0.0, 1.0, 1.0) for name in ("LV", "MYO", "MIT", "MVO")}
    cases = [CaseMetrics(cid, labels, {"LV": [0.0, 2.0]}) for cid in ("a", "b")]
    report = build_report(cases)
    assert report.summary.loc["LV", "crps"] == pytest.approx(0.5)
    assert report.summary.loc["MYO", "crps"] == 0.0


def test_compare_and_rank_reports():
    worse = build_report([_case("a", shift=2), _case("b", shift=1)])
    better = build_report([_case("a"), _case("b")])
    delta = compare_reports(worse, better)
    assert delta.loc["MYO", "dsc"] > 0
    assert delta.loc["MYO", "hd"] < 0

    ranks = rank_reports({"worse": worse, "better": better})
    assert ranks.loc["better", "dsc"] == 1
    assert ranks.loc["worse", "dsc"] == 2
    assert ranks.loc["better", "assd"] == 1


def test_mvo_free_cohort_counts_undefined_distances():
    report = build_report([_case("a"), _case("b")])
    assert report.undefined["MVO"]["hd"] == 2
    assert np.isnan(report.summary.loc["MVO", "hd_mean"])
    assert report.summary.loc["MVO", "dsc_mean"] == 100.0
