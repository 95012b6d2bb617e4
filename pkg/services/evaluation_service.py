"""
Cohort evaluation of prediction directories against ground truth, with the
optional before/after post-processing ablation.
"""
import glob
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import pandas as pd
from tqdm import tqdm

from config.settings import PipelineConfig
from utils.errors import AlreadyPostprocessed, MissingCase
from utils.export_helpers import export_to_csv, write_report_files, write_text
from utils.metrics import CaseMetrics, CohortReport, build_report, compare_reports, evaluate_case
from utils.postprocess import PostprocessSteps, postprocess_pipeline
from utils.volume import LabelVolume, read_meta, read_mvol

logger = logging.getLogger(__name__)

GT_SUFFIX = "_gt.mvol"
PRED_SUFFIX = "_pred.mvol"


def match_cases(pred_dir: str, gt_dir: str, case_ids: Optional[List[str]] = None) -> List[Tuple[str, str, str]]:
    """
    Pair ground-truth cases with their predictions.

    Every ground-truth case in gt_dir needs a prediction, unless case_ids
    restricts the evaluation to a subset; then exactly those cases are
    required.

    Returns:
        list: (case_id, prediction path, ground-truth path), sorted by case id

    Raises:
        MissingCase: A required case has no prediction or no ground truth
    """
    available = {
        os.path.basename(path)[:-len(GT_SUFFIX)]: path
        for path in glob.glob(os.path.join(gt_dir, f"*{GT_SUFFIX}"))
    }
    required = sorted(available) if case_ids is None else sorted(set(case_ids))
    if not required:
        raise MissingCase(f"No ground truth in {gt_dir}")

    no_gt = [case_id for case_id in required if case_id not in available]
    if no_gt:
        raise MissingCase(f"No ground truth in {gt_dir} for: {', '.join(no_gt)}")

    pairs, missing = [], []
    for case_id in required:
        pred_path = os.path.join(pred_dir, f"{case_id}{PRED_SUFFIX}")
        if os.path.exists(pred_path):
            pairs.append((case_id, pred_path, available[case_id]))
        else:
            missing.append(case_id)
    if missing:
        raise MissingCase(f"No prediction in {pred_dir} for: {', '.join(missing)}")
    return pairs


def _require_raw(pairs: List[Tuple[str, str, str]]) -> None:
    processed = [case_id for case_id, pred_path, _ in pairs if read_meta(pred_path).get("postprocessed")]
    if processed:
        raise AlreadyPostprocessed(
            f"The ablation needs raw predictions, but these are post-processed: {', '.join(processed)}. "
            f"Predict with --no-postprocess."
        )


def evaluate_cases(
    pairs: List[Tuple[str, str, str]],
    transform=None,
    progress: bool = True,
    with_hd95: bool = False,
) -> List[CaseMetrics]:
    """Per-case metrics, optionally after transforming each prediction."""
    cases = []
    for case_id, pred_path, gt_path in tqdm(pairs, desc="evaluate", disable=not progress):
        pred: LabelVolume = read_mvol(pred_path)
        if transform is not None:
            pred = transform(pred)
        gt: LabelVolume = read_mvol(gt_path)
        members = read_meta(pred_path).get("member_volumes_ml", {})
        cases.append(evaluate_case(pred, gt, case_id, members, with_hd95))
        logger.debug(f"Evaluated {case_id}")
    return cases


def evaluate(
    pred_dir: str,
    gt_dir: str,
    report_dir: str,
    cfg: PipelineConfig,
    ablate_postproc: bool = False,
    case_ids: Optional[List[str]] = None,
    progress: bool = True,
) -> Dict[str, CohortReport]:
    """
    Build and write cohort reports.

    Without ablation the predictions are evaluated as they are and written to
    cases.csv / report.json. With ablation the predictions must be raw network
    output (no sidecar marks them post-processed): they are evaluated as-is
    (pre) and after the configured post-processing (post), and ablation.csv
    holds post - pre.

    Args:
        pred_dir (str): Directory of <case>_pred.mvol files
        gt_dir (str): Directory of <case>_gt.mvol files
        report_dir (str): Output directory
        cfg (PipelineConfig): Post-processing settings for the ablation
        ablate_postproc (bool): Emit before/after reports and the difference table
        case_ids (list): Cases to evaluate, all required; default every ground truth in gt_dir
        progress (bool): Show a progress bar

    Returns:
        dict: Reports by name ('post', plus 'pre' with ablation)
    """
    try:
        pairs = match_cases(pred_dir, gt_dir, case_ids)

        if not ablate_postproc:
            report = build_report(evaluate_cases(pairs, progress=progress))
            write_report_files(report, report_dir)
            return {"post": report}

        _require_raw(pairs)
        steps = PostprocessSteps.from_config(cfg.postprocess)
        pre = build_report(evaluate_cases(pairs, progress=progress))
        post = build_report(evaluate_cases(pairs, lambda p: postprocess_pipeline(p, steps), progress))
        write_report_files(pre, report_dir, "_pre")
        write_report_files(post, report_dir, "_post")
        write_report_files(post, report_dir)
        write_text(os.path.join(report_dir, "ablation.csv"), export_to_csv(compare_reports(pre, post), index=True))
        logger.info(f"Post-processing ablation written to {report_dir}")
        return {"pre": pre, "post": post}
    except Exception as e:
        logger.error(f"Error evaluating {pred_dir} against {gt_dir}: {e}", exc_info=True)
        raise


@dataclass
class ReportBundle:
    """Report artifacts read back from a report directory."""
    summary: pd.DataFrame
    cases: pd.DataFrame
    num_cases: int
    undefined: Dict[str, Dict[str, int]]
    ablation: Optional[pd.DataFrame] = None


def load_report_dir(report_dir: str, suffix: str = "") -> ReportBundle:
    """
    Read report<suffix>.json, cases<suffix>.csv and, when present, ablation.csv.

    Raises:
        MissingCase: The directory holds no report
    """
    report_path = os.path.join(report_dir, f"report{suffix}.json")
    if not os.path.exists(report_path):
        raise MissingCase(f"No report{suffix}.json in {report_dir}")
    with open(report_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    summary = pd.DataFrame.from_dict(payload["labels"], orient="index").astype(float)
    cases = pd.read_csv(os.path.join(report_dir, f"cases{suffix}.csv"), dtype={"case_id": str})
    ablation_path = os.path.join(report_dir, "ablation.csv")
    ablation = pd.read_csv(ablation_path, index_col=0) if os.path.exists(ablation_path) else None
    return ReportBundle(summary, cases, int(payload["num_cases"]), payload.get("undefined", {}), ablation)
