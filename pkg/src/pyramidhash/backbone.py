"""Staged convolutional feature extractor with side outputs at stages 2-4."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SIDE_STAGES = (2, 3, 4)


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    blocks: int = 1
    downsample: bool = True

    def __post_init__(self):
        if self.out_channels < 1 or self.blocks < 1:
            raise ConfigError(f"invalid stage {self}: out_channels and blocks must be >= 1")


def desk_stages() -> list[StageSpec]:
    return [StageSpec(c) for c in (8, 16, 32, 64, 128)]


def paper_stages() -> list[StageSpec]:
    """ResNet18 stage widths; one conv per stage since only shapes matter here."""
    return [StageSpec(c) for c in (64, 64, 128, 256, 512)]


@dataclass
class FeatureMaps:
    m_s2: Tensor
    m_s3: Tensor
    m_s4: Tensor


@dataclass
class Backbone:
    input_size: int
    stages: list[StageSpec]
    parameters: dict[str, Tensor] = field(default_factory=dict)

    def conv_layers(self):
        """Yield (stage index, weight name, bias name, stride) in forward order."""
        for s, spec in enumerate(self.stages):
            for b in range(spec.blocks):
                stride = 2 if (spec.downsample and b == 0) else 1
                yield s, f"backbone.stage{s}.conv{b}.weight", f"backbone.stage{s}.conv{b}.bias", stride

    def side_sizes(self) -> dict[int, int]:
        size, out = self.input_size, {}
        for s, spec in enumerate(self.stages):
            if spec.downsample:
                size //= 2
            out[s] = size
        return {s: out[s] for s in SIDE_STAGES}


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_backbone(spec: list[StageSpec], input_size: int, seed: int = 0) -> Backbone:
    if len(spec) != 5:
        raise ConfigError(f"backbone needs 5 stages, got {len(spec)}")
    if input_size <= 0 or input_size % 32:
        raise ConfigError(f"input_size must be a positive multiple of 32, got {input_size}")
    net = Backbone(input_size, list(spec))
    rng = np.random.default_rng(seed)
    cin = 3
    for s, wname, bname, _ in net.conv_layers():
        cout = net.stages[s].out_channels
        net.parameters[wname] = Tensor(uniform_fan_in(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True)
        net.parameters[bname] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    return net


def backbone_forward(net: Backbone, image: Tensor) -> FeatureMaps:
    """Run the stages once and return the stage 2, 3 and 4 outputs.

    ``image`` is (3, S, S) or a batch (N, 3, S, S) with pixels in [0, 1].
    """
    image = T.as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-3:] != (3, net.input_size, net.input_size):
        raise DimensionError(f"expected image (3, {net.input_size}, {net.input_size}), got {image.shape}")
    h = image
    sides: dict[int, Tensor] = {}
    layers = list(net.conv_layers())
    for idx, (s, wname, bname, stride) in enumerate(layers):
        h = T.relu(T.conv2d(h, net.parameters[wname], stride=stride, padding=1, bias=net.parameters[bname]))
        if idx + 1 == len(layers) or layers[idx + 1][0] != s:
            sides[s] = h
    return FeatureMaps(sides[2], sides[3], sides[4])
