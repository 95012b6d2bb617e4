"""
Segmentation metrics: per-label DSC, HD and ASSD per case, cohort volume
agreement (CC, MAE, LOA, CRPS) and Table-style cohort reports.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree

from utils.errors import GeometryMismatch, TooFewCases, ZeroVariance
from utils.hierarchy import FOREGROUND_LABELS, STAGE3_LABEL_NAMES, to_stage3_labels
from utils.volume import LabelVolume, require_same_geometry

logger = logging.getLogger(__name__)

CASE_METRICS = ("dsc", "hd", "assd")
VOLUME_METRICS = ("cc", "mae", "loa", "crps")
ALL_METRICS = CASE_METRICS + VOLUME_METRICS
# metrics where a larger value is better; everything else ranks ascending
HIGHER_IS_BETTER = ("dsc", "cc")
MEAN_ROW = "Mean"

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class LabelMetrics:
    dsc: float
    hd: Optional[float]
    assd: Optional[float]
    pred_volume_ml: float
    gt_volume_ml: float
    hd95: Optional[float] = None


@dataclass
class CaseMetrics:
    case_id: str
    labels: Dict[str, LabelMetrics]
    # per label, the volume each ensemble member predicted
    member_volumes_ml: Dict[str, List[float]] = field(default_factory=dict)

    def to_rows(self) -> List[Dict]:
        rows = []
        for name, m in self.labels.items():
            row = {"case_id": self.case_id, "label": name}
            row.update({
                "dsc": m.dsc,
                "hd": np.nan if m.hd is None else m.hd,
                "assd": np.nan if m.assd is None else m.assd,
                "pred_volume_ml": m.pred_volume_ml,
                "gt_volume_ml": m.gt_volume_ml,
            })
            if m.hd95 is not None:
                row["hd95"] = m.hd95
            rows.append(row)
        return rows


@dataclass
class CohortReport:
    summary: pd.DataFrame        # index: labels + Mean; columns <metric>_mean / <metric>_std
    undefined: Dict[str, Dict[str, int]]
    cases: pd.DataFrame          # one row per case and label
    num_cases: int

    def metric_means(self) -> pd.DataFrame:
        """Per-label mean value of every metric (volume stats have no std)."""
        return pd.DataFrame({
            metric: self.summary[f"{metric}_mean"] if f"{metric}_mean" in self.summary else self.summary[metric]
            for metric in ALL_METRICS
        })

    def to_dict(self) -> Dict:
        summary = self.summary.astype(object).where(self.summary.notna(), None)
        return {
            "num_cases": self.num_cases,
            "labels": {label: summary.loc[label].to_dict() for label in summary.index},
            "undefined": self.undefined,
        }


# ---------------------------------------------------------------------------
# Per-case metrics
# ---------------------------------------------------------------------------

def _check_masks(pred_mask: np.ndarray, gt_mask: np.ndarray) -> None:
    if pred_mask.shape != gt_mask.shape:
        raise GeometryMismatch(f"Mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice overlap in percent; two empty masks agree perfectly (100)."""
    _check_masks(pred_mask, gt_mask)
    p, g = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary_points(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Physical centers (mm) of foreground voxels with a 6-neighbour outside the mask or grid."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    index = np.argwhere(mask & ~interior)
    return index * np.asarray(spacing, dtype=np.float64)


def surface_distances(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    spacing: Sequence[float],
    hd_percentile: Optional[float] = None,
) -> Tuple[Optional[float], Optional[float]]:
    """
    Hausdorff distance and average symmetric surface distance in mm.

    Args:
        pred_mask, gt_mask (np.ndarray): Boolean masks on the same grid
        spacing: Voxel spacing in mm
        hd_percentile (float): Report this percentile of the pooled distances
            instead of the maximum (95 gives HD95)

    Returns:
        tuple: (hd, assd), both None when either mask is empty
    """
    _check_masks(pred_mask, gt_mask)
    p = boundary_points(pred_mask, spacing)
    g = boundary_points(gt_mask, spacing)
    if len(p) == 0 or len(g) == 0:
        return None, None
    p_to_g = cKDTree(g).query(p)[0]
    g_to_p = cKDTree(p).query(g)[0]
    pooled = np.concatenate([p_to_g, g_to_p])
    if hd_percentile is None:
        hd = float(max(p_to_g.max(), g_to_p.max()))
    else:
        hd = float(np.percentile(pooled, hd_percentile))
    return hd, float(pooled.mean())


def volume_ml(mask: np.ndarray, spacing: Sequence[float]) -> float:
    return float(np.count_nonzero(mask)) * float(np.prod(spacing)) / 1000.0


def evaluate_case(
    pred: LabelVolume,
    gt: LabelVolume,
    case_id: str,
    member_volumes_ml: Optional[Dict[str, List[float]]] = None,
    with_hd95: bool = False,
) -> CaseMetrics:
    """
    DSC, HD, ASSD and volumes of the four foreground labels of one case.

    Args:
        pred (LabelVolume): Prediction (stage-2 predictions are read in stage-3 codes)
        gt (LabelVolume): Stage-3 ground truth
        case_id (str): Case identifier
        member_volumes_ml (dict): Optional per-label ensemble member volumes
        with_hd95 (bool): Also compute HD95

    Returns:
        CaseMetrics: Per-label metrics
    """
    require_same_geometry(pred, gt, "prediction and ground truth")
    pred3, gt3 = to_stage3_labels(pred), to_stage3_labels(gt)
    labels = {}
    for name in FOREGROUND_LABELS:
        code = STAGE3_LABEL_NAMES.index(name)
        p, g = pred3.data == code, gt3.data == code
        hd, assd = surface_distances(p, g, gt.spacing)
        hd95 = surface_distances(p, g, gt.spacing, 95.0)[0] if with_hd95 else None
        labels[name] = LabelMetrics(
            dsc=dice(p, g),
            hd=hd,
            assd=assd,
            pred_volume_ml=volume_ml(p, gt.spacing),
            gt_volume_ml=volume_ml(g, gt.spacing),
            hd95=hd95,
        )
    return CaseMetrics(case_id, labels, dict(member_volumes_ml or {}))


# ---------------------------------------------------------------------------
# Cohort statistics
# ---------------------------------------------------------------------------

def pearson_cc(pred: Sequence[float], gt: Sequence[float]) -> float:
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if p.size < 2:
        raise TooFewCases("Correlation needs at least two cases")
    p, g = p - p.mean(), g - g.mean()
    denom = np.sqrt(np.sum(p * p) * np.sum(g * g))
    if denom == 0:
        raise ZeroVariance("Correlation is undefined for constant volumes")
    return float(np.sum(p * g) / denom)


def limits_of_agreement(pred: Sequence[float], gt: Sequence[float]) -> float:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    if diff.size < 2:
        raise TooFewCases("Limits of agreement need at least two cases")
    return float(1.96 * np.std(diff, ddof=1))


def ensemble_crps(members: Sequence[float], truth: float) -> float:
    """Empirical-ensemble CRPS: mean |v_i - g| - mean |v_i - v_j| / 2."""
    v = np.asarray(members, dtype=np.float64)
    spread = np.abs(v[:, None] - v[None, :]).mean()
    return float(np.abs(v - truth).mean() - 0.5 * spread)


def cohort_volume_stats(
    pairs: Sequence[Tuple[float, float]],
    ensemble_vols: Optional[Sequence[Sequence[float]]] = None,
) -> Tuple[float, float, float, float]:
    """
    Volume agreement of a cohort.

    Args:
        pairs: (pred_ml, gt_ml) per case
        ensemble_vols: Optional member volumes per case for CRPS

    Returns:
        tuple: (cc, mae, loa, crps)
    """
    pred = np.array([p for p, _ in pairs], dtype=np.float64)
    gt = np.array([g for _, g in pairs], dtype=np.float64)
    if pred.size < 2:
        raise TooFewCases("Cohort volume statistics need at least two cases")
    cc = pearson_cc(pred, gt)
    mae = float(np.abs(pred - gt).mean())
    loa = limits_of_agreement(pred, gt)
    members = ensemble_vols if ensemble_vols is not None else [[v] for v in pred]
    crps = float(np.mean([ensemble_crps(m, g) for m, g in zip(members, gt)]))
    return cc, mae, loa, crps


def _safe_volume_stats(pred, gt, members) -> Dict[str, Optional[float]]:
    """Each volume statistic on its own; undefined ones become None."""
    stats: Dict[str, Optional[float]] = {}
    for name, fn in (("cc", pearson_cc), ("loa", limits_of_agreement)):
        try:
            stats[name] = fn(pred, gt)
        except (TooFewCases, ZeroVariance) as e:
            logger.info(f"{name.upper()} undefined: {e}")
            stats[name] = None
    stats["mae"] = float(np.abs(np.asarray(pred) - np.asarray(gt)).mean()) if len(pred) else None
    stats["crps"] = float(np.mean([ensemble_crps(m, g) for m, g in zip(members, gt)])) if len(pred) else None
    return stats


def build_report(cases: List[CaseMetrics], labels: Sequence[str] = FOREGROUND_LABELS) -> CohortReport:
    """
    Cohort summary: per-label mean/std (sample std) of DSC, HD and ASSD over
    the cases where they are defined, volume agreement statistics and a
    mean-over-labels row.

    Args:
        cases (list): Per-case metrics
        labels: Labels to report

    Returns:
        CohortReport: Summary table, undefined counts and the per-case table
    """
    frame = pd.DataFrame([row for case in cases for row in case.to_rows()])
    rows, undefined = {}, {}
    for label in labels:
        part = frame[frame["label"] == label] if not frame.empty else frame
        row, missing = {}, {}
        for metric in CASE_METRICS:
            values = part[metric].dropna() if metric in part else pd.Series(dtype=float)
            missing[metric] = int(len(part) - len(values))
            row[f"{metric}_mean"] = float(values.mean()) if len(values) else np.nan
            row[f"{metric}_std"] = float(values.std(ddof=1)) if len(values) > 1 else (0.0 if len(values) else np.nan)

        pred = part["pred_volume_ml"].to_numpy(dtype=np.float64) if len(part) else np.zeros(0)
        gt = part["gt_volume_ml"].to_numpy(dtype=np.float64) if len(part) else np.zeros(0)
        members = [case.member_volumes_ml.get(label) or [case.labels[label].pred_volume_ml]
                   for case in cases if label in case.labels]
        stats = _safe_volume_stats(pred, gt, members)
        for metric in VOLUME_METRICS:
            row[metric] = np.nan if stats[metric] is None else stats[metric]
            missing[metric] = int(stats[metric] is None)
        rows[label] = row
        undefined[label] = missing

    summary = pd.DataFrame.from_dict(rows, orient="index")
    # mean over the labels whose value is present
    summary.loc[MEAN_ROW] = summary.mean(axis=0, skipna=True)
    logger.info(f"Report over {len(cases)} cases, undefined counts: {undefined}")
    return CohortReport(summary, undefined, frame, len(cases))


def compare_reports(pre: CohortReport, post: CohortReport) -> pd.DataFrame:
    """Difference post - pre of every per-label mean, plus the mean-over-labels row."""
    return post.metric_means() - pre.metric_means()


def rank_reports(reports: Dict[str, CohortReport]) -> pd.DataFrame:
    """
    Rank named reports per metric by their mean-over-labels value.

    Returns:
        pd.DataFrame: Rows are report names, columns metrics, 1 = best
    """
    means = pd.DataFrame({name: report.metric_means().loc[MEAN_ROW] for name, report in reports.items()}).T
    ranks = {}
    for metric in ALL_METRICS:
        ranks[metric] = means[metric].rank(ascending=metric not in HIGHER_IS_BETTER, method="min")
    return pd.DataFrame(ranks).astype("Int64")
