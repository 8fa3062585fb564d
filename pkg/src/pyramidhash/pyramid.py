"""Vertical hashing head, lateral hashing heads, consensus fusion and binarization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, FeatureMaps, backbone_forward, build_backbone, uniform_fan_in
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

# pooled side length per stage: 2 ** (4 - t)
POOL_SIDE = {2: 4, 3: 2, 4: 1}


@dataclass(frozen=True)
class HashConfig:
    q: int

    def __post_init__(self):
        if self.q < 8 or self.q % 4:
            raise ConfigError(f"code length q must be >= 8 and divisible by 4, got {self.q}")


def stage_width(q: int, t: int) -> int:
    """Hash feature length produced by the lateral head of stage ``t``."""
    return q * 2 ** (4 - t)


@dataclass
class PyramidHeads:
    q: int
    parameters: dict[str, Tensor] = field(default_factory=dict)

    def fc(self, t: int) -> tuple[Tensor, Tensor]:
        return self.parameters[f"heads.fc_s{t}.weight"], self.parameters[f"heads.fc_s{t}.bias"]


def build_heads(q: int, channels: dict[int, int], seed: int = 0) -> PyramidHeads:
    """FC layers for stages 2, 3, 4; ``channels`` maps stage -> channel count."""
    HashConfig(q)
    rng = np.random.default_rng(seed)
    heads = PyramidHeads(q)
    for t in (4, 3, 2):
        fan_in = channels[t] * POOL_SIDE[t] ** 2
        out = stage_width(q, t)
        heads.parameters[f"heads.fc_s{t}.weight"] = Tensor(uniform_fan_in(rng, (out, fan_in), fan_in), requires_grad=True)
        heads.parameters[f"heads.fc_s{t}.bias"] = Tensor(np.zeros(out), requires_grad=True)
    return heads


@dataclass
class PyramidActivations:
    a_s4: Tensor
    a_s3: Tensor
    a_s2: Tensor
    f_s4: Tensor
    f_s3: Tensor
    f_s2: Tensor
    f_M1: Tensor
    f_M2: Tensor
    v: Tensor
    v_c: Tensor


def _pool_and_project(m: Tensor, side: int, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    if m.shape[-1] % side or m.shape[-2] % side:
        raise DimensionError(f"feature map {m.shape} does not tile into {side}x{side}")
    a = T.avgpool2d(m, side, side)
    f = T.affine(T.flatten(a, batched=m.ndim == 4), W, b)
    return a, f


def vertical_head(m_s4: Tensor, heads: PyramidHeads) -> tuple[Tensor, Tensor, Tensor]:
    """Global-average-pool the top stage, project to q dims, squash.

    Returns ``(a_s4, f_s4, v)``.
    """
    a, f = _pool_and_project(m_s4, POOL_SIDE[4], *heads.fc(4))
    return a, f, T.sigmoid(f)


def lateral_head(m_st: Tensor, t: int, heads: PyramidHeads) -> tuple[Tensor, Tensor]:
    """Pool stage ``t`` to a 2^(4-t) grid and project to q*2^(4-t) dims.

    Stage 4 has no lateral head of its own: its feature is the one computed
    by :func:`vertical_head`.
    """
    if t not in (2, 3):
        raise ContractError(f"lateral heads exist for stages 2 and 3, not {t}")
    return _pool_and_project(m_st, POOL_SIDE[t], *heads.fc(t))


def mediator(f_low: Tensor, f_high: Tensor) -> Tensor:
    """Halve ``f_low`` by pairwise averaging and add it to ``f_high``."""
    if f_low.shape[-1] != 2 * f_high.shape[-1] or f_low.shape[:-1] != f_high.shape[:-1]:
        raise DimensionError(f"mediator: low feature {f_low.shape} must be twice high feature {f_high.shape}")
    return T.add(T.avgpool1d_pairs(f_low), f_high)


def consensus_code(f_M2: Tensor) -> Tensor:
    return T.sigmoid(f_M2)


def pyramid_forward(maps: FeatureMaps, heads: PyramidHeads) -> PyramidActivations:
    a4, f4, v = vertical_head(maps.m_s4, heads)
    a3, f3 = lateral_head(maps.m_s3, 3, heads)
    a2, f2 = lateral_head(maps.m_s2, 2, heads)
    m1 = mediator(f2, f3)
    m2 = mediator(m1, f4)
    return PyramidActivations(a4, a3, a2, f4, f3, f2, m1, m2, v, consensus_code(m2))


@dataclass
class HashNet:
    """Backbone plus pyramid heads: everything that is trained."""

    backbone: Backbone
    heads: PyramidHeads

    @property
    def q(self) -> int:
        return self.heads.q

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.parameters, **self.heads.parameters}

    def forward(self, images) -> PyramidActivations:
        return pyramid_forward(backbone_forward(self.backbone, images), self.heads)

    def load_parameters(self, params: dict[str, np.ndarray | Tensor]) -> None:
        own = self.parameters()
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in own.items():
            value = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            if value.shape != t.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = np.array(value, dtype=np.float64)


def build_hashnet(stages, input_size: int, q: int, seed: int = 0) -> HashNet:
    backbone = build_backbone(stages, input_size, seed)
    channels = {t: backbone.stages[t].out_channels for t in (2, 3, 4)}
    # separate stream so head init does not depend on backbone size
    heads = build_heads(q, channels, seed=seed + 1_000_003)
    return HashNet(backbone, heads)


# ---------------------------------------------------------------- binary codes


def n_words(q: int) -> int:
    return (q + 63) // 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., q) 0/1 array into (..., ceil(q/64)) little-endian uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    q = bits.shape[-1]
    padded = np.zeros((*bits.shape[:-1], n_words(q) * 64), dtype=bool)
    padded[..., :q] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, q: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    bits = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")
    return bits[..., :q].astype(np.uint8)


@dataclass(frozen=True)
class BinaryCode:
    q: int
    bits: np.ndarray  # uint64 words

    def to_bits(self) -> np.ndarray:
        return unpack_bits(self.bits, self.q)

    @classmethod
    def from_bits(cls, bits) -> "BinaryCode":
        bits = np.asarray(bits)
        return cls(bits.shape[-1], pack_bits(bits))

    def __eq__(self, other):
        return isinstance(other, BinaryCode) and self.q == other.q and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.q, self.bits.tobytes()))


def threshold(v) -> np.ndarray:
    """0/1 bits with bit = 1 iff value >= 0.5, for any (..., q) array of codes."""
    arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ContractError("hash code values must lie in [0, 1]")
    return (arr >= 0.5).astype(np.uint8)


def binarize(v_c) -> BinaryCode:
    bits = threshold(v_c)
    if bits.ndim != 1:
        raise DimensionError(f"binarize expects a single code of shape (q,), got {bits.shape}")
    return BinaryCode.from_bits(bits)


SOURCES = ("consensus", "vertical")


def encode_images(net: HashNet, images: np.ndarray, source: str = "consensus", batch_size: int = 64) -> np.ndarray:
    """Binary codes (N, q) as 0/1 for a stack of images.

    ``source="consensus"`` thresholds the fused code; ``"vertical"`` thresholds
    the top-stage code instead.
    """
    if source not in SOURCES:
        raise ContractError(f"code source must be 'consensus' or 'vertical', got {source!r}")
    out = []
    for start in range(0, len(images), batch_size):
        acts = net.forward(images[start : start + batch_size])
        out.append(threshold(acts.v_c if source == "consensus" else acts.v))
    return np.concatenate(out) if out else np.zeros((0, net.q), dtype=np.uint8)
