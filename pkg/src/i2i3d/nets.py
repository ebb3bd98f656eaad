"""HED-3D and I2I-3D graphs, parameter bookkeeping and forward passes.

Output index ``m`` runs from 1 (coarsest, 1/8 resolution) to M = 4 (finest,
input resolution). Layer names are slash paths whose first component is the
training path the layer belongs to: ``f2c`` (fine-to-coarse stack, plus the
HED-3D side outputs and fusion) or ``c2f`` (coarse-to-fine stack of I2I-3D).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .layers import (
    ConvParams,
    FusionWeights,
    SideOutputParams,
    conv,
    fuse_side_outputs,
    init_fusion,
    init_he_normal,
    init_identity_conv,
    init_passthrough,
    init_side_output,
    mixing_layer,
    side_output,
)
from .ops import _stable_sigmoid
from .tensor import Tensor

HED3D = "hed3d"
I2I3D = "i2i3d"
VGG_STAGES = ((32, 32), (128, 128), (256, 256, 256), (512, 512, 512))


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = I2I3D
    stage_channels: tuple[tuple[int, ...], ...] = VGG_STAGES
    width_multiplier: float = 1.0
    # "native": side outputs supervised at their own resolution;
    # "upsampled": HED-3D side outputs supervised after upsampling to input size
    side_supervision: str = "native"
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(tuple(int(c) for c in s) for s in self.stage_channels))
        self.validate()

    @property
    def M(self) -> int:
        return len(self.stage_channels)

    def validate(self) -> None:
        if self.variant not in (HED3D, I2I3D):
            raise ValueError(f"variant must be {HED3D!r} or {I2I3D!r}, got {self.variant!r}")
        if len(self.stage_channels) != 4:
            raise ValueError(f"exactly 4 stages are required, got {len(self.stage_channels)}")
        if any(len(s) == 0 for s in self.stage_channels):
            raise ValueError("every stage needs at least one conv layer")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.side_supervision not in ("native", "upsampled"):
            raise ValueError(f"side_supervision must be 'native' or 'upsampled', got {self.side_supervision!r}")
        if self.side_supervision == "upsampled" and self.variant != HED3D:
            raise ValueError("upsampled side supervision only applies to HED-3D")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def channels(self) -> list[list[int]]:
        return [[max(1, int(round(c * self.width_multiplier))) for c in stage] for stage in self.stage_channels]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = [list(s) for s in self.stage_channels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "stage_channels": tuple(tuple(s) for s in d["stage_channels"])})

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


class NetworkParams:
    """Ordered map from layer path to its parameter container."""

    def __init__(self, layers: dict | None = None):
        self.layers: dict[str, ConvParams | SideOutputParams | FusionWeights] = dict(layers or {})

    def __getitem__(self, name):
        return self.layers[name]

    def __setitem__(self, name, value):
        self.layers[name] = value

    def __contains__(self, name):
        return name in self.layers

    def __len__(self):
        return len(self.layers)

    def names(self) -> list[str]:
        return list(self.layers)

    def tensors(self) -> dict[str, Tensor]:
        """Flat map ``layer.field`` -> learnable Tensor."""
        out = {}
        for name, layer in self.layers.items():
            for key, t in layer.tensors().items():
                out[f"{name}.{key}"] = t
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors().items()}

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        current = self.tensors()
        for name, t in current.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: expected {t.shape}, got {arrays[name].shape}")
        extra = set(arrays) - set(current)
        if extra:
            raise KeyError(f"unexpected parameters: {sorted(extra)}")
        for name, t in current.items():
            t.data = np.array(arrays[name], dtype=t.dtype)

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)


def path_of(name: str) -> str:
    return name.split("/", 1)[0]


@dataclass
class MultiScaleOutputs:
    """Per-output activations, coarsest first, plus the features that fed them."""

    activations: list[Tensor]
    upsampled: list[Tensor] | None = None
    fused: Tensor | None = None
    features: dict[str, Tensor] = field(default_factory=dict)
    side_supervision: str = "native"

    @property
    def M(self) -> int:
        return len(self.activations)

    @property
    def supervised(self) -> list[Tensor]:
        """Activations as they enter the loss (native or upsampled)."""
        if self.side_supervision == "upsampled":
            return self.upsampled
        return self.activations

    @property
    def probabilities(self) -> list[np.ndarray]:
        return [_stable_sigmoid(a.data) for a in self.activations]

    @property
    def fused_probability(self) -> np.ndarray | None:
        return None if self.fused is None else _stable_sigmoid(self.fused.data)

    @property
    def top(self) -> np.ndarray:
        """Final full-resolution probability map: fused for HED-3D, finest output for I2I-3D."""
        if self.fused is not None:
            return self.fused_probability
        return self.probabilities[-1]


class Network:
    def __init__(self, spec: NetworkSpec, params: NetworkParams):
        self.spec = spec
        self.params = params

    def __call__(self, x: Tensor) -> MultiScaleOutputs:
        return forward(self, self.params, x)

    def layer_counts(self) -> dict[str, int]:
        names = self.params.names()
        return {
            "f2c_conv": sum(1 for n in names if n.startswith("f2c/stage")),
            "pool": self.spec.M - 1,
            "side": sum(1 for n in names if "/out" in n),
            "fusion": sum(1 for n in names if n.endswith("/fuse")),
            "mix": sum(1 for n in names if n.endswith("/mix")),
            "c2f_conv": sum(1 for n in names if n.startswith("c2f/stage") and "/conv" in n),
        }


def _build_f2c(spec: NetworkSpec, rng: np.random.Generator, params: NetworkParams) -> None:
    c_in = spec.in_channels
    for s, stage in enumerate(spec.channels(), start=1):
        for i, c in enumerate(stage, start=1):
            params[f"f2c/stage{s}/conv{i}"] = init_he_normal(c, c_in, 3, rng)
            c_in = c


def build_hed3d(spec: NetworkSpec, rng: np.random.Generator | int = 0) -> Network:
    if spec.variant != HED3D:
        raise ValueError(f"build_hed3d needs variant {HED3D!r}, got {spec.variant!r}")
    rng = np.random.default_rng(rng)
    params = NetworkParams()
    _build_f2c(spec, rng, params)
    chans = spec.channels()
    for m in range(1, spec.M + 1):
        params[f"f2c/out{m}"] = init_side_output(chans[spec.M - m][-1])
    params["f2c/fuse"] = init_fusion(spec.M)
    return Network(spec, params)


def build_i2i3d(spec: NetworkSpec, rng: np.random.Generator | int = 0) -> Network:
    if spec.variant != I2I3D:
        raise ValueError(f"build_i2i3d needs variant {I2I3D!r}, got {spec.variant!r}")
    rng = np.random.default_rng(rng)
    params = NetworkParams()
    _build_f2c(spec, rng, params)
    chans = spec.channels()
    params["c2f/out1"] = init_side_output(chans[-1][-1])
    coarse = chans[-1][-1]
    for m, s in zip(range(2, spec.M + 1), range(spec.M - 1, 0, -1)):
        fine = chans[s - 1][-1]
        params[f"c2f/stage{s}/mix"] = init_passthrough(fine, coarse)
        params[f"c2f/stage{s}/conv1"] = init_identity_conv(3, fine)
        params[f"c2f/stage{s}/conv2"] = init_identity_conv(3, fine)
        params[f"c2f/out{m}"] = init_side_output(fine)
        coarse = fine
    return Network(spec, params)


def build_network(spec: NetworkSpec, rng: np.random.Generator | int = 0) -> Network:
    return build_hed3d(spec, rng) if spec.variant == HED3D else build_i2i3d(spec, rng)


def _upsample_to_full(t: Tensor, times: int) -> Tensor:
    for _ in range(times):
        t = ops.upsample3d(t, 2, "trilinear")
    return t


def forward(net: Network, params: NetworkParams, x: Tensor) -> MultiScaleOutputs:
    spec = net.spec
    if x.ndim != 5:
        raise ValueError(f"network input must be rank 5, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} input channel(s), got {x.shape[1]}")
    halvings = spec.M - 1
    if any(e % 2**halvings for e in x.shape[2:]):
        raise ValueError(f"input extents {x.shape[2:]} must be divisible by {2 ** halvings}")

    features: dict[str, Tensor] = {}
    h = x
    for s, stage in enumerate(spec.channels(), start=1):
        if s > 1:
            h = ops.avg_pool3d(h, 2)
        for i in range(1, len(stage) + 1):
            h = conv(h, params[f"f2c/stage{s}/conv{i}"])
        features[f"f2c{s}"] = h

    if spec.variant == HED3D:
        acts = [side_output(features[f"f2c{spec.M + 1 - m}"], params[f"f2c/out{m}"]) for m in range(1, spec.M + 1)]
        ups = [_upsample_to_full(a, spec.M - m) for m, a in enumerate(acts, start=1)]
        fused = fuse_side_outputs(ups, params["f2c/fuse"])
        return MultiScaleOutputs(acts, ups, fused, features, spec.side_supervision)

    c = features[f"f2c{spec.M}"]
    features[f"c2f{spec.M}"] = c
    acts = [side_output(c, params["c2f/out1"])]
    for m, s in zip(range(2, spec.M + 1), range(spec.M - 1, 0, -1)):
        up = ops.upsample3d(c, 2, "trilinear")
        mixed = mixing_layer(features[f"f2c{s}"], up, params[f"c2f/stage{s}/mix"])
        features[f"mix{s}"] = mixed
        c = conv(mixed, params[f"c2f/stage{s}/conv1"])
        c = conv(c, params[f"c2f/stage{s}/conv2"])
        features[f"c2f{s}"] = c
        acts.append(side_output(c, params[f"c2f/out{m}"]))
    return MultiScaleOutputs(acts, None, None, features)

