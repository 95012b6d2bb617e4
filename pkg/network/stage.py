"""
One cascade stage: a constant-width 3D U-Net with pre- and post-convolutions
and a 1x1x1 head that returns logits.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from network.layers import Conv3d, Dropout, Grads, LeakyReLU, MaxPool3d, Upsample3d
from utils.errors import IndivisibleDims, NoRecordedForward, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageArch:
    in_channels: int
    out_channels: int
    levels: int = 3
    base_filters: int = 8
    pre_convs: int = 2
    post_convs: int = 3
    dropout_rate: float = 0.1
    slope: float = 0.1

    def __post_init__(self):
        if self.levels < 1 or self.base_filters < 1:
            raise ValueError("A stage needs at least one level and one filter")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("Channel counts must be positive")
        if self.pre_convs < 1:
            raise ValueError("A stage needs at least one pre-convolution")

    def to_dict(self) -> Dict:
        return asdict(self)


class _ConvBlock:
    """conv -> LeakyReLU, optionally followed by dropout."""

    def __init__(self, name: str, in_channels: int, out_channels: int, slope: float,
                 dropout_rate: Optional[float] = None):
        self.conv = Conv3d(name, in_channels, out_channels)
        self.act = LeakyReLU(f"{name}.act", slope)
        self.drop = Dropout(f"{name}.drop", dropout_rate) if dropout_rate is not None else None

    def forward(self, x, params, training, rng):
        out = self.act.forward(self.conv.forward(x, params))
        if self.drop is not None:
            out = self.drop.forward(out, training, rng)
        return out

    def backward(self, grad, grads):
        if self.drop is not None:
            grad = self.drop.backward(grad)
        return self.conv.backward(self.act.backward(grad), grads)


class _Level:
    """conv - dropout - conv, the building block of every encoder and decoder level."""

    def __init__(self, name: str, in_channels: int, filters: int, slope: float, dropout_rate: float):
        self.first = _ConvBlock(f"{name}.conv0", in_channels, filters, slope, dropout_rate)
        self.second = _ConvBlock(f"{name}.conv1", filters, filters, slope)

    def forward(self, x, params, training, rng):
        return self.second.forward(self.first.forward(x, params, training, rng), params, training, rng)

    def backward(self, grad, grads):
        return self.first.backward(self.second.backward(grad, grads), grads)


class StageModel:
    """
    A single U-Net stage with named parameters.

    Layout: pre-convs, encoder levels with max pooling in between, decoder
    levels that upsample and concatenate the encoder skip, post-convs and a
    1x1x1 head. Every 3x3x3 conv has the same width (base_filters).
    """

    def __init__(self, arch: StageArch, params: Dict[str, np.ndarray], dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        f, slope, rate = arch.base_filters, arch.slope, arch.dropout_rate

        self.pre = [
            _ConvBlock(f"pre.{i}", arch.in_channels if i == 0 else f, f, slope)
            for i in range(arch.pre_convs)
        ]
        self.encoder = [_Level(f"enc.{lvl}", f, f, slope, rate) for lvl in range(arch.levels)]
        self.pools = [MaxPool3d(f"enc.{lvl}.pool") for lvl in range(arch.levels - 1)]
        # decoder levels run from the second deepest up to the top
        self.decoder = {
            lvl: _Level(f"dec.{lvl}", 2 * f, f, slope, rate) for lvl in range(arch.levels - 2, -1, -1)
        }
        self.upsamples = {lvl: Upsample3d(f"dec.{lvl}.up") for lvl in self.decoder}
        self.post = [_ConvBlock(f"post.{i}", f, f, slope) for i in range(arch.post_convs)]
        self.head = Conv3d("head", f, arch.out_channels, kernel_size=1)

        self.params = {name: np.asarray(value, dtype=self.dtype) for name, value in params.items()}
        missing = set(self.param_shapes()) - set(self.params)
        if missing:
            raise ShapeMismatch(f"Stage parameters missing: {sorted(missing)}")
        for name, shape in self.param_shapes().items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"Parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self._recorded = False

    @classmethod
    def build(cls, arch: StageArch, rng: np.random.Generator, dtype=np.float32) -> "StageModel":
        """He-initialised stage with zero biases."""
        params: Dict[str, np.ndarray] = {}
        for conv in cls._conv_layout(arch):
            params.update(conv.init_params(rng, np.dtype(dtype)))
        return cls(arch, params, dtype)

    @staticmethod
    def _conv_layout(arch: StageArch) -> List[Conv3d]:
        f = arch.base_filters
        convs = [Conv3d(f"pre.{i}", arch.in_channels if i == 0 else f, f) for i in range(arch.pre_convs)]
        for lvl in range(arch.levels):
            convs += [Conv3d(f"enc.{lvl}.conv0", f, f), Conv3d(f"enc.{lvl}.conv1", f, f)]
        for lvl in range(arch.levels - 2, -1, -1):
            convs += [Conv3d(f"dec.{lvl}.conv0", 2 * f, f), Conv3d(f"dec.{lvl}.conv1", f, f)]
        convs += [Conv3d(f"post.{i}", f, f) for i in range(arch.post_convs)]
        convs.append(Conv3d("head", f, arch.out_channels, kernel_size=1))
        return convs

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for conv in self._conv_layout(self.arch):
            k = conv.kernel_size
            shapes[conv.weight_name] = (conv.out_channels, conv.in_channels, k, k, k)
            shapes[conv.bias_name] = (conv.out_channels,)
        return shapes

    @property
    def divisor(self) -> int:
        return 2 ** (self.arch.levels - 1)

    def forward(self, x: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """
        Logits of the stage for input x.

        Args:
            x (np.ndarray): Input (B, in_channels, X, Y, Z)
            training (bool): Enables dropout
            rng (np.random.Generator): Dropout randomness, required when training

        Returns:
            np.ndarray: Logits (B, out_channels, X, Y, Z)
        """
        if x.ndim != 5 or x.shape[1] != self.arch.in_channels:
            raise ShapeMismatch(
                f"Stage expects (B, {self.arch.in_channels}, X, Y, Z) input, got {x.shape}"
            )
        if any(n % self.divisor for n in x.shape[2:]):
            raise IndivisibleDims(f"Spatial dims {x.shape[2:]} are not divisible by {self.divisor}")

        out = np.asarray(x, dtype=self.dtype)
        for block in self.pre:
            out = block.forward(out, self.params, training, rng)

        skips = []
        for lvl, level in enumerate(self.encoder):
            out = level.forward(out, self.params, training, rng)
            if lvl < self.arch.levels - 1:
                skips.append(out)
                out = self.pools[lvl].forward(out)

        for lvl, level in self.decoder.items():
            up = self.upsamples[lvl].forward(out)
            out = level.forward(np.concatenate([skips[lvl], up], axis=1), self.params, training, rng)

        for block in self.post:
            out = block.forward(out, self.params, training, rng)
        self._recorded = True
        return self.head.forward(out, self.params)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, Grads]:
        """
        Replay the recorded forward pass backwards.

        Args:
            grad (np.ndarray): dL/dlogits (B, out_channels, X, Y, Z)

        Returns:
            tuple: (dL/dinput, parameter gradients by name)
        """
        if not self._recorded:
            raise NoRecordedForward("Stage backward called without a recorded forward pass")
        self._recorded = False
        grads: Grads = {}
        f = self.arch.base_filters

        grad = self.head.backward(np.asarray(grad, dtype=self.dtype), grads)
        for block in reversed(self.post):
            grad = block.backward(grad, grads)

        skip_grads: Dict[int, np.ndarray] = {}
        # decoder ran deepest-first, so unwind it top-first
        for lvl in sorted(self.decoder):
            dcat = self.decoder[lvl].backward(grad, grads)
            skip_grads[lvl] = dcat[:, :f]
            grad = self.upsamples[lvl].backward(dcat[:, f:])

        for lvl in range(self.arch.levels - 1, -1, -1):
            if lvl < self.arch.levels - 1:
                grad = self.pools[lvl].backward(grad) + skip_grads[lvl]
            grad = self.encoder[lvl].backward(grad, grads)

        for block in reversed(self.pre):
            grad = block.backward(grad, grads)
        return grad, grads


def stage_forward(
    model: StageModel,
    x: np.ndarray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    return model.forward(x, training, rng)
