"""
Ensemble inference: per-model subgroup routing, probability averaging,
resampling back to the acquisition grid and post-processing there.
"""
import glob
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from config.settings import WORKERS, PipelineConfig
from network.cascade import CascadeModel, cascade_forward, require_same_arch
from network.checkpoint import load_ensemble
from services.phantom_service import case_paths, load_manifest
from utils.augment import preprocess_eval
from utils.errors import ShapeMismatch
from utils.hierarchy import FOREGROUND_LABELS, STAGE3_LABEL_NAMES, Subgroup, final_labels, select_final
from utils.loss import softmax_array
from utils.postprocess import PostprocessSteps, postprocess_pipeline
from utils.volume import (
    LabelVolume, ProbKind, ProbVolume, ScalarVolume, entropy_map,
    read_meta, read_mvol, resample_nearest, resample_trilinear, write_meta, write_mvol,
)

logger = logging.getLogger(__name__)

AVERAGE_MODES = ("probs", "logits")


@dataclass
class EnsemblePrediction:
    labels: LabelVolume          # stage-3 codes
    probs: ProbVolume            # averaged routed probabilities
    member_labels: List[LabelVolume] = field(default_factory=list)


def routed_prediction(model: CascadeModel, x: ScalarVolume, subgroup: Subgroup, average: str = "probs") -> ProbVolume:
    """
    One model's routed prediction: stage 3 for D8, stage 2 otherwise.

    Args:
        model (CascadeModel): Inference model (EMA weights), dropout off
        x (ScalarVolume): Preprocessed image on the model grid
        subgroup (Subgroup): Acquisition subgroup
        average (str): 'probs' returns probabilities, 'logits' the routed logits

    Returns:
        ProbVolume: Routed PROBS (or LOGITS) volume
    """
    if any(n % model.divisor for n in x.dims):
        raise ShapeMismatch(f"Image dims {x.dims} do not fit a {model.stage1.arch.levels}-level model")
    out = cascade_forward(model, np.asarray(x.data)[None, None], training=False)
    logits2 = out.p2[0].astype(np.float64)
    logits3 = out.p3[0].astype(np.float64)
    y2 = ProbVolume(softmax_array(logits2), x.spacing, ProbKind.PROBS, 2)
    y3 = ProbVolume(softmax_array(logits3), x.spacing, ProbKind.PROBS, 3)
    routed = select_final(y2, y3, subgroup)
    if average == "logits":
        raw = logits3 if routed.schema == 3 else logits2
        return ProbVolume(raw, x.spacing, ProbKind.LOGITS, routed.schema)
    return routed


def ensemble_predict(
    models: Sequence[CascadeModel],
    x: ScalarVolume,
    subgroup: Subgroup,
    postproc: Optional[PostprocessSteps] = None,
    average: str = "probs",
    workers: int = 1,
) -> EnsemblePrediction:
    """
    Average the routed predictions of N models and take the argmax.

    Args:
        models: Ensemble members sharing one architecture
        x (ScalarVolume): Image already passed through preprocess_eval
        subgroup (Subgroup): Acquisition subgroup
        postproc (PostprocessSteps): Post-processing to apply on this grid, None to skip
        average (str): Average probabilities ('probs') or logits ('logits')
        workers (int): Threads used to run the members

    Returns:
        EnsemblePrediction: Hard stage-3 labels, averaged probabilities and member labels
    """
    if not models:
        raise ValueError("Ensemble prediction needs at least one model")
    if average not in AVERAGE_MODES:
        raise ValueError(f"average must be one of {AVERAGE_MODES}")
    require_same_arch(list(models))
    subgroup = Subgroup.parse(subgroup)

    if workers > 1 and len(models) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(models))) as pool:
            routed = list(pool.map(lambda m: routed_prediction(m, x, subgroup, average), models))
    else:
        routed = [routed_prediction(m, x, subgroup, average) for m in models]

    schema = routed[0].schema
    mean = np.mean([r.data for r in routed], axis=0)
    if average == "logits":
        probs = ProbVolume(softmax_array(mean), x.spacing, ProbKind.PROBS, schema)
        member_probs = [ProbVolume(softmax_array(r.data), x.spacing, ProbKind.PROBS, schema) for r in routed]
    else:
        probs = ProbVolume(mean, x.spacing, ProbKind.PROBS, schema)
        member_probs = routed

    labels = final_labels(probs)
    if postproc is not None:
        labels = postprocess_pipeline(labels, postproc)
    members = [final_labels(p) for p in member_probs]
    return EnsemblePrediction(labels, probs, members)


def label_volumes_ml(labels: LabelVolume) -> Dict[str, float]:
    """Volume of every foreground label in ml."""
    counts = np.bincount(labels.data.ravel(), minlength=len(STAGE3_LABEL_NAMES))
    return {
        name: float(counts[STAGE3_LABEL_NAMES.index(name)]) * labels.voxel_volume_ml
        for name in FOREGROUND_LABELS
    }


@dataclass
class CasePrediction:
    labels: LabelVolume                 # on the acquisition grid
    entropy: ScalarVolume               # on the acquisition grid
    member_volumes_ml: Dict[str, List[float]]
    seconds: float


def predict_case(
    models: Sequence[CascadeModel],
    image: ScalarVolume,
    subgroup: Subgroup,
    cfg: PipelineConfig,
    postprocess: bool = True,
    workers: int = 1,
) -> CasePrediction:
    """
    Predict one acquisition: normalize and resample to the model grid, run the
    ensemble, bring the hard labels back with nearest-neighbour resampling and
    post-process on the acquisition grid.

    Args:
        models: Ensemble members
        image (ScalarVolume): Raw image on its acquisition grid
        subgroup (Subgroup): Acquisition subgroup
        cfg (PipelineConfig): Grid, ensemble and post-processing settings
        postprocess (bool): Apply the post-processing pipeline
        workers (int): Threads used to run the members

    Returns:
        CasePrediction: Labels, entropy map, member volumes and wall time
    """
    started = time.time()
    x = preprocess_eval(image, cfg.grid.dims, cfg.grid.spacing)
    result = ensemble_predict(models, x, subgroup, None, cfg.ensemble.average, workers)

    labels = resample_nearest(result.labels, image.dims, image.spacing)
    if postprocess:
        labels = postprocess_pipeline(labels, PostprocessSteps.from_config(cfg.postprocess))
    entropy = resample_trilinear(entropy_map(result.probs), image.dims, image.spacing)

    member_volumes: Dict[str, List[float]] = {name: [] for name in FOREGROUND_LABELS}
    for member in result.member_labels:
        native = resample_nearest(member, image.dims, image.spacing)
        for name, value in label_volumes_ml(native).items():
            member_volumes[name].append(value)

    seconds = time.time() - started
    logger.info(f"Predicted {subgroup} case with {len(models)} model(s) in {seconds:.2f}s")
    return CasePrediction(labels, entropy, member_volumes, seconds)


def checkpoint_paths(models_dir: str) -> List[str]:
    """Final member checkpoints of a directory, sorted (intermediate *_step* files excluded)."""
    paths = sorted(p for p in glob.glob(os.path.join(models_dir, "*.crck")) if "_step" not in os.path.basename(p))
    if not paths:
        raise FileNotFoundError(f"No checkpoints found in {models_dir}")
    return paths


def write_prediction(prediction: CasePrediction, out_path: str, case_id: str, subgroup: Subgroup,
                     postprocessed: bool, entropy_path: Optional[str] = None) -> None:
    write_mvol(prediction.labels, out_path)
    write_meta(out_path, {
        "case_id": case_id,
        "subgroup": Subgroup.parse(subgroup).value,
        "postprocessed": postprocessed,
        "member_volumes_ml": prediction.member_volumes_ml,
    })
    if entropy_path:
        write_mvol(prediction.entropy, entropy_path)


def predict_file(
    models_dir: str,
    in_path: str,
    subgroup: Subgroup,
    out_path: str,
    cfg: PipelineConfig,
    postprocess: bool = True,
    entropy_path: Optional[str] = None,
) -> CasePrediction:
    """Predict one MVOL image with every member checkpoint of models_dir."""
    models = load_ensemble(checkpoint_paths(models_dir))
    image = read_mvol(in_path)
    case_id = read_meta(in_path).get("case_id", os.path.basename(in_path).split("_img")[0])
    prediction = predict_case(models, image, subgroup, cfg, postprocess, WORKERS)
    write_prediction(prediction, out_path, case_id, subgroup, postprocess, entropy_path)
    return prediction


def predict_corpus(
    models_dir: str,
    corpus_dir: str,
    out_dir: str,
    cfg: PipelineConfig,
    split: str = "test",
    postprocess: bool = True,
    with_entropy: bool = False,
) -> List[str]:
    """
    Predict every case of a corpus split into <case>_pred.mvol files.

    Returns:
        list: Written prediction paths
    """
    models = load_ensemble(checkpoint_paths(models_dir))
    manifest = load_manifest(corpus_dir, split)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for row in manifest.itertuples():
        image = read_mvol(case_paths(corpus_dir, row.case_id)["img"])
        prediction = predict_case(models, image, row.subgroup, cfg, postprocess, WORKERS)
        out_path = os.path.join(out_dir, f"{row.case_id}_pred.mvol")
        entropy_path = os.path.join(out_dir, f"{row.case_id}_entropy.mvol") if with_entropy else None
        write_prediction(prediction, out_path, row.case_id, row.subgroup, postprocess, entropy_path)
        written.append(out_path)
    logger.info(f"Wrote {len(written)} predictions to {out_dir}")
    return written
