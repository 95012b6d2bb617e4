"""
Three-stage cascade: each stage sees the image concatenated with the raw
logits of its predecessor, and the gated objective backpropagates through
all three stages.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config.settings import NetConfig
from network.optim import OptimizerState, adam_step, update_ema
from network.stage import StageArch, StageModel
from utils.errors import ArchitectureMismatch, SchemaMismatch, ShapeMismatch
from utils.hierarchy import contains_mvo, num_labels
from utils.loss import CascadeLossConfig, cascade_loss_arrays, softmax_array, softmax_backward, stage_targets
from utils.volume import LabelVolume

logger = logging.getLogger(__name__)

STAGE_NAMES = ("stage1", "stage2", "stage3")
STAGE_OUT = (num_labels(1), num_labels(2), num_labels(3))
# the image channel follows the predecessor logits
STAGE_IN = (1, 1 + STAGE_OUT[0], 1 + STAGE_OUT[1])


def _stage_arch(net: NetConfig, index: int) -> StageArch:
    return StageArch(
        in_channels=STAGE_IN[index],
        out_channels=STAGE_OUT[index],
        levels=net.levels,
        base_filters=net.base_filters,
        pre_convs=net.pre_convs,
        post_convs=net.post_convs,
        dropout_rate=net.dropout_rate,
        slope=net.slope,
    )


class CascadeModel:
    """Stages M1, M2, M3 with 1, 4 and 5 input channels."""

    def __init__(self, stage1: StageModel, stage2: StageModel, stage3: StageModel):
        for index, stage in enumerate((stage1, stage2, stage3)):
            if (stage.arch.in_channels, stage.arch.out_channels) != (STAGE_IN[index], STAGE_OUT[index]):
                raise ShapeMismatch(
                    f"Stage {index + 1} must map {STAGE_IN[index]} -> {STAGE_OUT[index]} channels, "
                    f"got {stage.arch.in_channels} -> {stage.arch.out_channels}"
                )
        self.stage1 = stage1
        self.stage2 = stage2
        self.stage3 = stage3

    @classmethod
    def build(cls, net: NetConfig, rng: np.random.Generator, dtype=None) -> "CascadeModel":
        """He-initialised cascade for a network configuration."""
        dtype = np.dtype(dtype or net.dtype)
        return cls(*(StageModel.build(_stage_arch(net, i), rng, dtype) for i in range(3)))

    @property
    def stages(self) -> List[StageModel]:
        return [self.stage1, self.stage2, self.stage3]

    @property
    def dtype(self) -> np.dtype:
        return self.stage1.dtype

    @property
    def divisor(self) -> int:
        return self.stage1.divisor

    def arch(self) -> Dict:
        """Shared architecture descriptor (stage channel counts are implied)."""
        a = self.stage1.arch
        return {
            "levels": a.levels,
            "base_filters": a.base_filters,
            "pre_convs": a.pre_convs,
            "post_convs": a.post_convs,
            "dropout_rate": a.dropout_rate,
            "slope": a.slope,
        }

    def parameters(self) -> Dict[str, np.ndarray]:
        """All parameters as '<stage>/<name>'; the arrays are the live ones."""
        flat = {}
        for stage_name, stage in zip(STAGE_NAMES, self.stages):
            for name, value in stage.params.items():
                flat[f"{stage_name}/{name}"] = value
        return flat

    def with_parameters(self, flat: Dict[str, np.ndarray], dtype=None) -> "CascadeModel":
        """A new model with the same architecture and copied parameters."""
        dtype = np.dtype(dtype or self.dtype)
        stages = []
        for stage_name, stage in zip(STAGE_NAMES, self.stages):
            prefix = f"{stage_name}/"
            params = {k[len(prefix):]: np.array(v) for k, v in flat.items() if k.startswith(prefix)}
            stages.append(StageModel(stage.arch, params, dtype))
        return CascadeModel(*stages)

    @classmethod
    def from_arch(cls, arch: Dict, flat: Dict[str, np.ndarray], dtype=np.float32) -> "CascadeModel":
        net = NetConfig(**{**arch, "dtype": np.dtype(dtype).name})
        stages = []
        for index, stage_name in enumerate(STAGE_NAMES):
            prefix = f"{stage_name}/"
            params = {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}
            stages.append(StageModel(_stage_arch(net, index), params, dtype))
        return cls(*stages)


def require_same_arch(models: List[CascadeModel]) -> None:
    if not models:
        return
    reference = models[0].arch()
    for index, model in enumerate(models[1:], start=1):
        if model.arch() != reference:
            raise ArchitectureMismatch(f"Ensemble member {index} has architecture {model.arch()}, expected {reference}")


@dataclass
class CascadeOutput:
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    # batch rows that went through stage 3, in the order of p3's rows
    stage3_index: np.ndarray


def cascade_forward(
    model: CascadeModel,
    x: np.ndarray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    stage3_mask: Optional[np.ndarray] = None,
) -> CascadeOutput:
    """
    Logits of all three stages.

    p1 = M1(x), p2 = M2(p1 + x), p3 = M3(p2 + x) where + concatenates channels.

    Args:
        model (CascadeModel): Cascade to run
        x (np.ndarray): Images (B, 1, X, Y, Z)
        training (bool): Enables dropout
        rng (np.random.Generator): Dropout randomness
        stage3_mask (np.ndarray): Optional per-sample booleans; stage 3 only runs
            on the selected samples

    Returns:
        CascadeOutput: Stage logits and the rows covered by p3
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeMismatch(f"Cascade input must be (B, 1, X, Y, Z), got {x.shape}")
    x = np.asarray(x, dtype=model.dtype)
    batch = x.shape[0]
    if stage3_mask is None:
        index = np.arange(batch)
    else:
        mask = np.asarray(stage3_mask, dtype=bool).reshape(-1)
        if mask.shape[0] != batch:
            raise ShapeMismatch(f"stage3_mask has {mask.shape[0]} entries for a batch of {batch}")
        index = np.flatnonzero(mask)

    p1 = model.stage1.forward(x, training, rng)
    p2 = model.stage2.forward(np.concatenate([p1, x], axis=1), training, rng)
    if index.size:
        p3 = model.stage3.forward(np.concatenate([p2[index], x[index]], axis=1), training, rng)
    else:
        p3 = np.zeros((0, STAGE_OUT[2]) + x.shape[2:], dtype=model.dtype)
    return CascadeOutput(p1, p2, p3, index)


@dataclass
class BatchLoss:
    total: float
    per_stage: Tuple[float, float, float]
    delta_mvo: List[int]
    # dL/dlogits of each stage, batch mean already applied
    grad_logits: Tuple[np.ndarray, np.ndarray, np.ndarray]


def cascade_batch_loss(
    out: CascadeOutput,
    labels: np.ndarray,
    cfg: CascadeLossConfig = CascadeLossConfig(),
) -> BatchLoss:
    """
    Mean gated cascade objective over a batch and its gradient w.r.t. the logits.

    Args:
        out (CascadeOutput): Forward result
        labels (np.ndarray): Stage-3 codes per sample (B, X, Y, Z)
        cfg (CascadeLossConfig): Stage weights and Dice settings

    Returns:
        BatchLoss: Mean total, mean per-stage losses, gates and logit gradients
    """
    batch = out.p1.shape[0]
    if labels.shape != (batch,) + out.p1.shape[2:]:
        raise ShapeMismatch(f"Labels {labels.shape} do not match the batch {out.p1.shape}")
    rows3 = {int(b): row for row, b in enumerate(out.stage3_index)}
    grads = [np.zeros(p.shape, dtype=np.float64) for p in (out.p1, out.p2, out.p3)]
    totals, stage_sums, deltas = [], np.zeros(3), []

    for b in range(batch):
        y = LabelVolume(labels[b], (1.0, 1.0, 1.0))
        delta = int(contains_mvo(y))
        q = [softmax_array(out.p1[b].astype(np.float64)), softmax_array(out.p2[b].astype(np.float64)), None]
        if b in rows3:
            q[2] = softmax_array(out.p3[rows3[b]].astype(np.float64))
        elif delta:
            raise SchemaMismatch(f"Sample {b} contains MVO but skipped stage 3")
        result = cascade_loss_arrays(stage_targets(y), q, delta, cfg)
        totals.append(result.total)
        stage_sums += result.per_stage
        deltas.append(delta)
        for stage, g in enumerate(result.grads):
            if g is None:
                continue
            row = b if stage < 2 else rows3[b]
            grads[stage][row] = softmax_backward(q[stage], g) / batch

    dtype = out.p1.dtype
    return BatchLoss(
        total=float(np.mean(totals)),
        per_stage=tuple(float(v) for v in stage_sums / batch),
        delta_mvo=deltas,
        grad_logits=tuple(g.astype(dtype) for g in grads),
    )


def cascade_backward(model: CascadeModel, out: CascadeOutput, loss: BatchLoss) -> Dict[str, np.ndarray]:
    """
    Chain the stage gradients back through the concatenations.

    Stage-1 parameters collect contributions from all three loss terms, stage-2
    from terms two and three, stage-3 from the gated term only.

    Returns:
        dict: Gradients keyed like CascadeModel.parameters()
    """
    d1, d2, d3 = (np.array(g) for g in loss.grad_logits)
    flat: Dict[str, np.ndarray] = {}
    k1, k2 = STAGE_OUT[0], STAGE_OUT[1]

    if out.stage3_index.size:
        din3, grads3 = model.stage3.backward(d3)
        np.add.at(d2, out.stage3_index, din3[:, :k2])
        flat.update({f"stage3/{k}": v for k, v in grads3.items()})
    din2, grads2 = model.stage2.backward(d2)
    d1 += din2[:, :k1]
    flat.update({f"stage2/{k}": v for k, v in grads2.items()})
    _, grads1 = model.stage1.backward(d1)
    flat.update({f"stage1/{k}": v for k, v in grads1.items()})
    return flat


def backward_and_step(
    model: CascadeModel,
    opt: OptimizerState,
    out: CascadeOutput,
    loss: BatchLoss,
) -> Dict[str, np.ndarray]:
    """
    Backpropagate the batch objective, apply Adam and refresh the EMA shadows.

    Args:
        model (CascadeModel): Trained in place
        opt (OptimizerState): Updated in place
        out (CascadeOutput): Recorded forward pass
        loss (BatchLoss): Objective of that forward pass

    Returns:
        dict: The gradients that were applied
    """
    grads = cascade_backward(model, out, loss)
    params = model.parameters()
    adam_step(opt, params, grads)
    update_ema(opt, params)
    return grads


def ema_model(model: CascadeModel, opt: OptimizerState) -> CascadeModel:
    """Inference copy of the model carrying the EMA shadow parameters."""
    return model.with_parameters(opt.ema)
