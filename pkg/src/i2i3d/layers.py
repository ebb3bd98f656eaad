"""Parameter containers and composite layers: mixing, side outputs, fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


@dataclass
class ConvParams:
    weight: Tensor  # (C_out, C_in, kd, kh, kw)
    bias: Tensor  # (C_out,)

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 5:
            raise ValueError(f"conv weight must be rank 5, got {w}")
        if any(k % 2 == 0 for k in w[2:]):
            raise ValueError(f"conv kernel extents must be odd, got {w[2:]}")
        if w[0] < 1:
            raise ValueError("conv needs at least one output channel")
        if self.bias.shape != (w[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {w[0]} output channels")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class SideOutputParams:
    classifier: ConvParams

    def __post_init__(self):
        if self.classifier.c_out != 1 or self.classifier.weight.shape[2:] != (1, 1, 1):
            raise ValueError(f"side output must be a 1x1x1 conv to one channel, got {self.classifier.weight.shape}")

    def tensors(self) -> dict[str, Tensor]:
        return self.classifier.tensors()


@dataclass
class FusionWeights:
    weights: Tensor  # (M,)
    bias: Tensor  # (1,)

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weights, "bias": self.bias}


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True)


def conv_params(weight: np.ndarray, bias: np.ndarray | None = None) -> ConvParams:
    weight = np.asarray(weight)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return ConvParams(_param(weight), _param(bias))


def init_he_normal(c_out: int, c_in: int, k: int, rng: np.random.Generator) -> ConvParams:
    """Zero-mean normal weights with std sqrt(2 / fan_in); zero bias."""
    fan_in = c_in * k**3
    w = rng.standard_normal((c_out, c_in, k, k, k)) * np.sqrt(2.0 / fan_in)
    return conv_params(w)


def init_passthrough(c_fine: int, c_coarse: int) -> ConvParams:
    """1x1x1 mixing weights that copy the fine input and ignore the coarse one."""
    w = np.zeros((c_fine, c_fine + c_coarse, 1, 1, 1))
    w[np.arange(c_fine), np.arange(c_fine)] = 1.0
    return conv_params(w)


def init_identity_conv(k: int, c: int) -> ConvParams:
    if k % 2 == 0:
        raise ValueError(f"identity conv needs an odd kernel, got {k}")
    w = np.zeros((c, c, k, k, k))
    w[np.arange(c), np.arange(c), k // 2, k // 2, k // 2] = 1.0
    return conv_params(w)


def init_side_output(c_in: int) -> SideOutputParams:
    return SideOutputParams(conv_params(np.zeros((1, c_in, 1, 1, 1))))


def init_fusion(m: int) -> FusionWeights:
    return FusionWeights(_param(np.full(m, 1.0 / m)), _param(np.zeros(1)))


def conv(x: Tensor, p: ConvParams, activation: bool = True) -> Tensor:
    y = ops.conv3d(x, p.weight, p.bias)
    return ops.relu(y) if activation else y


def mixing_layer(fine: Tensor, coarse_upsampled: Tensor, params: ConvParams) -> Tensor:
    """Concatenate fine and upsampled coarse features, then mix with a 1x1x1 conv."""
    if fine.shape[0] != coarse_upsampled.shape[0] or fine.shape[2:] != coarse_upsampled.shape[2:]:
        raise ValueError(
            f"mixing layer spatial mismatch: fine {fine.shape} vs coarse {coarse_upsampled.shape} "
            "(wrong upsampling factor upstream?)"
        )
    if params.weight.shape[2:] != (1, 1, 1):
        raise ValueError(f"mixing layer needs a 1x1x1 kernel, got {params.weight.shape}")
    expected = fine.shape[1] + coarse_upsampled.shape[1]
    if params.c_in != expected:
        raise ValueError(f"mixing layer expects C_in={expected} (fine + coarse), params have {params.c_in}")
    return ops.conv3d(ops.concat_channels(fine, coarse_upsampled), params.weight, params.bias)


def side_output(features: Tensor, params: SideOutputParams) -> Tensor:
    """One-channel activation at the features' own resolution."""
    if params.classifier.c_in != features.shape[1]:
        raise ValueError(
            f"side output channel mismatch: features have {features.shape[1]} channels, "
            f"classifier expects {params.classifier.c_in}"
        )
    return ops.conv3d(features, params.classifier.weight, params.classifier.bias)


def fuse_side_outputs(activations: Sequence[Tensor], w: FusionWeights) -> Tensor:
    if len(activations) != w.weights.shape[0]:
        raise ValueError(f"{len(activations)} activations but {w.weights.shape[0]} fusion weights")
    return ops.weighted_sum(activations, w.weights, w.bias)
