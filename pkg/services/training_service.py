"""
Cascade training: pair sampling, augmentation, the optimisation loop and
ensemble training over independent seeds.
"""
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.settings import WORKERS, PipelineConfig, config_to_dict, validate_config
from network.cascade import CascadeModel, backward_and_step, cascade_batch_loss, cascade_forward
from network.checkpoint import checkpoint_from_model, write_checkpoint
from network.optim import OptimizerState
from services.phantom_service import case_paths, load_manifest
from utils.augment import augment_pair, case_rng, preprocess_eval
from utils.errors import EmptyPool
from utils.export_helpers import export_to_csv, export_to_json, write_text
from utils.hierarchy import MVO, Subgroup, contains_mvo
from utils.loss import CascadeLossConfig
from utils.volume import LabelVolume, ScalarVolume, read_mvol, resample_nearest

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.csv"


@dataclass(frozen=True)
class CorpusCase:
    case_id: str
    image: ScalarVolume
    labels: LabelVolume
    subgroup: Subgroup

    @property
    def has_mvo(self) -> bool:
        return contains_mvo(self.labels)


@dataclass
class TrainResult:
    model: CascadeModel
    opt: OptimizerState
    history: pd.DataFrame
    checkpoint_path: Optional[str] = None


def load_cases(corpus_dir: str, split: Optional[str] = "train") -> List[CorpusCase]:
    """Read the image/label pairs of one split of a corpus."""
    manifest = load_manifest(corpus_dir, split)
    cases = []
    for row in manifest.itertuples():
        paths = case_paths(corpus_dir, row.case_id)
        cases.append(CorpusCase(row.case_id, read_mvol(paths["img"]), read_mvol(paths["gt"]), Subgroup.parse(row.subgroup)))
    logger.info(f"Loaded {len(cases)} {split or 'all'} cases from {corpus_dir}")
    return cases


def split_pools(cases: Sequence[CorpusCase]) -> Tuple[List[CorpusCase], List[CorpusCase]]:
    """(cases with MVO, cases without MVO); both must be non-empty."""
    with_mvo = [c for c in cases if c.has_mvo]
    without_mvo = [c for c in cases if not c.has_mvo]
    if not with_mvo:
        raise EmptyPool("Training needs at least one case with MVO")
    if not without_mvo:
        raise EmptyPool("Training needs at least one case without MVO")
    return with_mvo, without_mvo


def sample_training_pair(
    cases: Sequence[CorpusCase],
    rng: np.random.Generator,
    pools: Optional[Tuple[List[CorpusCase], List[CorpusCase]]] = None,
) -> Tuple[CorpusCase, CorpusCase]:
    """
    One case with and one without MVO, each drawn uniformly from its pool.

    Args:
        cases: Training cases
        rng (np.random.Generator): Random stream
        pools: Pre-split pools, to avoid re-scanning the labels every call

    Returns:
        tuple: (case with MVO, case without MVO)
    """
    with_mvo, without_mvo = pools if pools is not None else split_pools(cases)
    return with_mvo[rng.integers(len(with_mvo))], without_mvo[rng.integers(len(without_mvo))]


def prepare_sample(
    case: CorpusCase,
    cfg: PipelineConfig,
    iteration: int,
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Image and stage-3 codes of one training sample on the model grid."""
    dims, spacing = cfg.grid.dims, cfg.grid.spacing
    if cfg.train.augment:
        rng = case_rng(seed, case.case_id, iteration)
        image, labels = augment_pair(case.image, case.labels, rng, cfg.augment, dims, spacing)
    else:
        image = preprocess_eval(case.image, dims, spacing)
        labels = resample_nearest(case.labels, dims, spacing)
    return np.asarray(image.data), np.asarray(labels.data)


def loss_config(cfg: PipelineConfig) -> CascadeLossConfig:
    l1, l2, l3 = cfg.train.lambdas
    return CascadeLossConfig(l1, l2, l3, cfg.train.epsilon, cfg.train.weighting)


def _stem(path: str) -> str:
    return os.path.splitext(path)[0]


def train(
    cfg: PipelineConfig,
    cases: Sequence[CorpusCase],
    out_path: Optional[str] = None,
    seed: Optional[int] = None,
    progress: bool = True,
) -> TrainResult:
    """
    Train one cascade on (MVO, non-MVO) pairs.

    Each iteration augments both cases, runs stages 1-2 on both and stage 3
    on the MVO case only, averages the gated objective over the pair and
    takes one Adam step followed by an EMA update.

    Args:
        cfg (PipelineConfig): Grid, network, training and augmentation settings
        cases: Training cases
        out_path (str): Final checkpoint path; intermediate checkpoints and the
            training log are written next to it
        seed (int): Overrides cfg.train.seed
        progress (bool): Show a progress bar

    Returns:
        TrainResult: Trained model, optimiser state (EMA shadows) and loss history
    """
    validate_config(cfg)
    seed = cfg.train.seed if seed is None else seed
    pools = split_pools(cases)
    streams = np.random.SeedSequence([seed, 7]).spawn(3)
    init_rng, pair_rng, dropout_rng = (np.random.default_rng(s) for s in streams)

    model = CascadeModel.build(cfg.net, init_rng)
    opt = OptimizerState.create(
        model.parameters(),
        lr=cfg.train.lr,
        beta1=cfg.train.beta1,
        beta2=cfg.train.beta2,
        eps=cfg.train.adam_eps,
        ema_decay=cfg.train.ema_decay,
        ema_warmup=cfg.train.ema_warmup,
    )
    loss_cfg = loss_config(cfg)
    history: List[Dict] = []
    started = time.time()
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)

    try:
        for iteration in tqdm(range(1, cfg.train.iterations + 1), desc=f"train seed {seed}", disable=not progress):
            mvo_case, plain_case = sample_training_pair(cases, pair_rng, pools)
            samples = [prepare_sample(c, cfg, iteration, seed) for c in (mvo_case, plain_case)]
            x = np.stack([img for img, _ in samples])[:, None]
            y = np.stack([lab for _, lab in samples])
            # augmentation can push MVO out of the field of view
            mask = np.array([bool(np.any(lab == MVO)) for lab in y])

            out = cascade_forward(model, x, training=True, rng=dropout_rng, stage3_mask=mask)
            loss = cascade_batch_loss(out, y, loss_cfg)
            backward_and_step(model, opt, out, loss)

            history.append({
                "iteration": iteration,
                "total": loss.total,
                "stage1": loss.per_stage[0],
                "stage2": loss.per_stage[1],
                "stage3": loss.per_stage[2],
                "mvo_case": mvo_case.case_id,
                "plain_case": plain_case.case_id,
            })
            if iteration % cfg.train.log_every == 0 or iteration == 1:
                logger.info(
                    f"[seed {seed}] iter {iteration}: total {loss.total:.4f} "
                    f"(L1 {loss.per_stage[0]:.4f}, L2 {loss.per_stage[1]:.4f}, L3 {loss.per_stage[2]:.4f})"
                )
            if out_path and cfg.train.checkpoint_every and iteration % cfg.train.checkpoint_every == 0 \
                    and iteration != cfg.train.iterations:
                write_checkpoint(checkpoint_from_model(model, opt), f"{_stem(out_path)}_step{iteration:06d}.crck")
    except Exception as e:
        logger.error(f"Training failed at seed {seed}: {e}", exc_info=True)
        raise

    frame = pd.DataFrame(history)
    logger.info(f"[seed {seed}] trained {cfg.train.iterations} iterations in {time.time() - started:.1f}s")
    if out_path:
        write_checkpoint(checkpoint_from_model(model, opt), out_path)
        write_text(f"{_stem(out_path)}_{TRAIN_LOG_NAME}", export_to_csv(frame))
        write_text(f"{_stem(out_path)}_config.json", export_to_json(config_to_dict(cfg)))
    return TrainResult(model, opt, frame, out_path)


def _train_member(args) -> str:
    cfg, corpus_dir, out_path, seed = args
    cases = load_cases(corpus_dir, "train")
    train(cfg, cases, out_path, seed, progress=False)
    return out_path


def member_path(out_dir: str, member: int) -> str:
    return os.path.join(out_dir, f"member_{member:02d}.crck")


def train_ensemble(
    cfg: PipelineConfig,
    corpus_dir: str,
    out_dir: str,
    workers: int = WORKERS,
) -> List[str]:
    """
    Train cfg.ensemble.size members with seeds train.seed, train.seed + 1, ...

    Members are independent; with workers > 1 they run in separate processes.

    Returns:
        list: Checkpoint paths in member order
    """
    os.makedirs(out_dir, exist_ok=True)
    jobs = [
        (cfg, corpus_dir, member_path(out_dir, m), cfg.train.seed + m)
        for m in range(cfg.ensemble.size)
    ]
    logger.info(f"Training {len(jobs)} ensemble members with {workers} worker(s)")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            paths = list(pool.map(_train_member, jobs))
    else:
        cases = load_cases(corpus_dir, "train")
        paths = [train(c, cases, path, seed).checkpoint_path for c, _, path, seed in jobs]
    return paths
