"""Self-attention grid: a learned spatial probability map merged into features.

The grid is computed from the low-resolution branch (1x1 conv -> batch norm ->
ReLU -> spatial softmax) and applied to the max-filtered high-resolution
branch by a broadcast element-wise product. The grid sums to 1 per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

from .layers import BatchNorm2d, Conv2d, l2_normalize, maxpool2d, spatial_softmax
from .tensor import ShapeMismatchError, Tensor, mul, relu

__all__ = ["AttentionGrid", "SagModule", "compute_grid", "downsample_high", "apply_grid", "sag_forward"]


@dataclass
class AttentionGrid:
    """Single-channel spatial map [N x 1 x h x w]; entries in [0,1], per-sample sum 1."""

    values: Tensor

    @property
    def shape(self) -> tuple:
        return self.values.shape


class SagModule:
    """Grid head for one attention depth: C -> 1 channel reduction plus optional output L2."""

    def __init__(self, in_channels: int, apply_l2: bool = False, seed: int = 0):
        self.conv1x1 = Conv2d(in_channels, 1, kernel_size=1, seed=seed)
        self.bn = BatchNorm2d(1)
        self.apply_l2 = apply_l2

    def named_parameters(self):
        out = [("conv1x1." + n, p) for n, p in self.conv1x1.named_parameters()]
        out += [("bn." + n, p) for n, p in self.bn.named_parameters()]
        return out

    def named_buffers(self):
        return [("bn." + n, b) for n, b in self.bn.named_buffers()]


def compute_grid(m: SagModule, f2: Tensor, train: bool = False) -> AttentionGrid:
    """Normalized attention grid from low-resolution features.

    The pre-softmax heatmap is relu(bn(conv1x1(f2))); the softmax runs jointly
    over all spatial positions so each sample's grid sums to 1.
    """
    heat = relu(m.bn(m.conv1x1(f2), train))
    return AttentionGrid(spatial_softmax(heat))


def downsample_high(f1: Tensor) -> Tensor:
    """Non-overlapping 2x2 max filter aligning high-res features to the grid."""
    n, c, h, w = f1.shape if f1.data.ndim == 4 else (None,) * 4
    if f1.data.ndim != 4 or h % 2 or w % 2:
        raise ShapeMismatchError(f"downsample_high needs even N x C x 2h x 2w extents, got {f1.shape}")
    return maxpool2d(f1, 2)


def apply_grid(f1_down: Tensor, g: AttentionGrid) -> Tensor:
    """Weight every channel of f1_down by the (broadcast) grid."""
    if f1_down.shape[0] != g.values.shape[0] or f1_down.shape[2:] != g.values.shape[2:]:
        raise ShapeMismatchError(
            f"grid {g.values.shape} does not align with features {f1_down.shape}")
    return mul(f1_down, g.values)


def sag_forward(m: SagModule, f1: Tensor, f2: Tensor, train: bool = False) -> Tensor:
    """Full attention merge: downsample f1, weight by the grid from f2, optional L2."""
    if f1.shape[0] != f2.shape[0] or f1.shape[1] != f2.shape[1]:
        raise ShapeMismatchError(f"branch shapes {f1.shape} and {f2.shape} disagree")
    if f1.shape[2] != 2 * f2.shape[2] or f1.shape[3] != 2 * f2.shape[3]:
        raise ShapeMismatchError(
            f"high branch {f1.shape} must be exactly twice the low branch {f2.shape}")
    v = apply_grid(downsample_high(f1), compute_grid(m, f2, train))
    return l2_normalize(v) if m.apply_l2 else v
