"""
Layer kernels for 3D volumes with hand-written reverse-mode gradients.

Tensors are (batch, channels, nx, ny, nz). Every functional kernel has a
matching *_backward; the layer classes wrap them and keep the forward cache
needed by their own backward pass.
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np

from utils.errors import NoRecordedForward, OddSpatialDims, ShapeMismatch

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]

# (B, C, X2, Y2, Z2, dz, dy, dx) -> (B, C, X2, dx, Y2, dy, Z2, dz)
_WINDOW_TO_POOL = (0, 1, 2, 7, 3, 6, 4, 5)


def _require_5d(x: np.ndarray, what: str) -> None:
    if x.ndim != 5:
        raise ShapeMismatch(f"{what} expects a (batch, channels, nx, ny, nz) tensor, got {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _offsets(kernel: np.ndarray):
    kx, ky, kz = kernel.shape[2:]
    for a in range(kx):
        for b in range(ky):
            for c in range(kz):
                yield a, b, c


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> int:
    _require_5d(x, "conv3d")
    if kernel.ndim != 5:
        raise ShapeMismatch(f"Kernel must be (out, in, kx, ky, kz), got {kernel.shape}")
    if any(k % 2 == 0 for k in kernel.shape[2:]) or len(set(kernel.shape[2:])) != 1:
        raise ShapeMismatch(f"Kernel spatial size must be odd and cubic, got {kernel.shape[2:]}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"Kernel takes {kernel.shape[1]} channels, input has {x.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeMismatch(f"Bias must have {kernel.shape[0]} entries, got {bias.shape}")
    return (kernel.shape[2] - 1) // 2


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Same-padded 3D cross-correlation with zero padding.

    Args:
        x (np.ndarray): Input (B, Ci, X, Y, Z)
        kernel (np.ndarray): Weights (Co, Ci, k, k, k), k odd
        bias (np.ndarray): Bias (Co,)

    Returns:
        np.ndarray: Output (B, Co, X, Y, Z)
    """
    p = _check_conv(x, kernel, bias)
    nx, ny, nz = x.shape[2:]
    xp = _pad(x, p)
    # accumulate as (Co, B, X, Y, Z), transposed once at the end
    out = np.zeros((kernel.shape[0], x.shape[0], nx, ny, nz), dtype=x.dtype)
    for a, b, c in _offsets(kernel):
        patch = xp[:, :, a:a + nx, b:b + ny, c:c + nz]
        out += np.tensordot(kernel[:, :, a, b, c], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3, 4)
    out += bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out)


def conv3d_backward(
    grad: np.ndarray, x: np.ndarray, kernel: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of conv3d w.r.t. input, kernel and bias.

    Args:
        grad (np.ndarray): Upstream gradient (B, Co, X, Y, Z)
        x (np.ndarray): Forward input
        kernel (np.ndarray): Forward kernel

    Returns:
        tuple: (dx, dkernel, dbias)
    """
    p = (kernel.shape[2] - 1) // 2
    nx, ny, nz = x.shape[2:]
    xp = _pad(x, p)
    dxp = np.zeros(xp.shape, dtype=x.dtype)
    dkernel = np.zeros_like(kernel)
    for a, b, c in _offsets(kernel):
        patch = xp[:, :, a:a + nx, b:b + ny, c:c + nz]
        dkernel[:, :, a, b, c] = np.tensordot(grad, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        contribution = np.tensordot(kernel[:, :, a, b, c], grad, axes=([0], [1]))
        dxp[:, :, a:a + nx, b:b + ny, c:c + nz] += contribution.transpose(1, 0, 2, 3, 4)
    dbias = grad.sum(axis=(0, 2, 3, 4))
    dx = dxp[:, :, p:p + nx, p:p + ny, p:p + nz] if p else dxp
    return np.ascontiguousarray(dx), dkernel, dbias


# ---------------------------------------------------------------------------
# Pointwise layers
# ---------------------------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, slope * x).astype(x.dtype, copy=False)


def leaky_relu_backward(grad: np.ndarray, x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return grad * np.where(x > 0, 1.0, slope).astype(grad.dtype, copy=False)


def dropout(
    x: np.ndarray,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity.

    Returns:
        tuple: (output, scale mask or None when the layer is the identity)
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("Training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return x * mask, mask


def dropout_backward(grad: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return grad if mask is None else grad * mask


# ---------------------------------------------------------------------------
# Resolution changes
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray) -> np.ndarray:
    b, ch, nx, ny, nz = x.shape
    blocks = x.reshape(b, ch, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    # window element order is x-fastest: index = dx + 2*dy + 4*dz
    blocks = blocks.transpose(0, 1, 2, 4, 6, 7, 5, 3)
    return blocks.reshape(b, ch, nx // 2, ny // 2, nz // 2, 8)


def maxpool3d(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    2x2x2 max pooling with stride 2.

    Args:
        x (np.ndarray): Input (B, C, X, Y, Z) with even spatial dims

    Returns:
        tuple: (pooled output, argmax index per window)
    """
    _require_5d(x, "maxpool3d")
    if any(n % 2 for n in x.shape[2:]):
        raise OddSpatialDims(f"Max pooling needs even spatial dims, got {x.shape[2:]}")
    windows = _windows(x)
    # argmax picks the first maximal element of each window
    index = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    return out, index


def maxpool3d_backward(grad: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to the element that won its window."""
    b, ch, mx, my, mz = grad.shape
    windows = np.zeros((b, ch, mx, my, mz, 8), dtype=grad.dtype)
    np.put_along_axis(windows, index[..., None], grad[..., None], axis=-1)
    blocks = windows.reshape(b, ch, mx, my, mz, 2, 2, 2).transpose(_WINDOW_TO_POOL)
    return np.ascontiguousarray(blocks.reshape(b, ch, 2 * mx, 2 * my, 2 * mz))


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """
    Linear interpolation weights for doubling an axis of length n, shape (2n, n).

    Output center i samples the source at (i + 0.5)/2 - 0.5, clamped to [0, n-1].
    """
    matrix = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        c = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(c))
        hi = min(lo + 1, n - 1)
        frac = c - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def upsample_trilinear(x: np.ndarray) -> np.ndarray:
    """Double every spatial dim by separable linear interpolation."""
    _require_5d(x, "upsample_trilinear")
    out = x
    # each tensordot moves the interpolated axis to the end, so three passes
    # over axis 2 cycle back to (B, C, 2X, 2Y, 2Z)
    for n in x.shape[2:]:
        out = np.tensordot(out, upsample_matrix(n, x.dtype), axes=([2], [1]))
    return np.ascontiguousarray(out)


def upsample_trilinear_backward(grad: np.ndarray) -> np.ndarray:
    """Transpose of upsample_trilinear."""
    out = grad
    for n2 in grad.shape[2:]:
        out = np.tensordot(out, upsample_matrix(n2 // 2, grad.dtype), axes=([2], [0]))
    return np.ascontiguousarray(out)


def he_init(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Normal(0, sqrt(2/fan_in)) kernel initialisation."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------

class Layer:
    """A named step of a stage that remembers what its backward pass needs."""

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise NoRecordedForward(f"Layer '{self.name}' has no recorded forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv3d(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size ** 3

    def init_params(self, rng: np.random.Generator, dtype) -> Dict[str, np.ndarray]:
        k = self.kernel_size
        return {
            self.weight_name: he_init((self.out_channels, self.in_channels, k, k, k), self.fan_in, rng, dtype),
            self.bias_name: np.zeros(self.out_channels, dtype=dtype),
        }

    def forward(self, x: np.ndarray, params: Dict[str, np.ndarray]) -> np.ndarray:
        kernel = params[self.weight_name]
        self._cache = (x, kernel)
        return conv3d(x, kernel, params[self.bias_name])

    def backward(self, grad: np.ndarray, grads: Grads) -> np.ndarray:
        x, kernel = self._take_cache()
        dx, dkernel, dbias = conv3d_backward(grad, x, kernel)
        grads[self.weight_name] = grads.get(self.weight_name, 0) + dkernel
        grads[self.bias_name] = grads.get(self.bias_name, 0) + dbias
        return dx


class LeakyReLU(Layer):
    def __init__(self, name: str, slope: float = 0.1):
        super().__init__(name)
        self.slope = slope

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return leaky_relu(x, self.slope)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return leaky_relu_backward(grad, self._take_cache(), self.slope)


class Dropout(Layer):
    def __init__(self, name: str, rate: float = 0.1):
        super().__init__(name)
        self.rate = rate

    def forward(self, x: np.ndarray, training: bool, rng: Optional[np.random.Generator]) -> np.ndarray:
        out, mask = dropout(x, self.rate, training, rng)
        # the cache must be set even for the identity case
        self._cache = (mask,)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        (mask,) = self._take_cache()
        return dropout_backward(grad, mask)


class MaxPool3d(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        out, index = maxpool3d(x)
        self._cache = index
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return maxpool3d_backward(grad, self._take_cache())


class Upsample3d(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return upsample_trilinear(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self._take_cache()
        return upsample_trilinear_backward(grad)
