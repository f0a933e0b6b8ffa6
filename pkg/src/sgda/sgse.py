"""Slice grouped squeeze-and-excitation adapter.

A feature map is cut into ``G`` slabs along each anatomical axis; each slab
gets its own channel gate from a direction-specific SE pair, the gated slabs
are re-stacked, and the three directional maps are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor

DIRECTIONS = ("axial", "coronal", "sagittal")
AXIS = {"axial": 1, "coronal": 2, "sagittal": 3}
AXIS_NAME = {"axial": "depth", "coronal": "height", "sagittal": "width"}


@dataclass(frozen=True)
class SgseConfig:
    channels: int
    groups: int = 1
    reduction: int = 16

    def __post_init__(self):
        if self.channels < 1 or self.groups < 1 or self.reduction < 1:
            raise ConfigError(f"channels, groups and reduction must be >= 1: {self}")
        if self.channels % self.reduction:
            raise ConfigError(f"channels {self.channels} not divisible by reduction {self.reduction}")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


@dataclass
class SgseWeights:
    """One (W1, W2) pair per direction, shared by every group of that direction."""

    w1: dict[str, Parameter]
    w2: dict[str, Parameter]

    @classmethod
    def init(cls, channels, reduction, rng, directions=DIRECTIONS, dtype=np.float64):
        hidden = channels // reduction
        w1, w2 = {}, {}
        for d in directions:
            w1[d] = Parameter(_uniform(rng, (hidden, channels), channels, dtype))
            w2[d] = Parameter(_uniform(rng, (channels, hidden), hidden, dtype))
        return cls(w1, w2)

    @classmethod
    def zeros(cls, channels, reduction, directions=DIRECTIONS, dtype=np.float64):
        hidden = channels // reduction
        return cls({d: Parameter(np.zeros((hidden, channels), dtype)) for d in directions},
                   {d: Parameter(np.zeros((channels, hidden), dtype)) for d in directions})

    @property
    def directions(self) -> tuple[str, ...]:
        return tuple(d for d in DIRECTIONS if d in self.w1)

    def named_parameters(self, prefix: str = "sgse") -> dict[str, Parameter]:
        out = {}
        for d in self.directions:
            out[f"{prefix}.{d}.w1"] = self.w1[d]
            out[f"{prefix}.{d}.w2"] = self.w2[d]
        return out


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def group_split(x: Tensor, direction: str, groups: int) -> list[Tensor]:
    if direction not in AXIS:
        raise ConfigError(f"unknown direction {direction!r}")
    extent = x.shape[AXIS[direction]]
    if extent % groups:
        raise ConfigError(
            f"{direction} split: {AXIS_NAME[direction]} extent {extent} is not divisible by G={groups}")
    return T.split(x, AXIS[direction], groups)


def excitation(xg: Tensor, w: SgseWeights, direction: str) -> Tensor:
    """Pre-sigmoid channel response ``W2 relu(W1 avgpool(xg))``."""
    C = xg.shape[0]
    pooled = T.reshape(T.global_avg_pool3d(xg), (C, 1))
    hidden = T.relu(T.matmul(w.w1[direction], pooled))
    return T.reshape(T.matmul(w.w2[direction], hidden), (C,))


def modulate(xg: Tensor, y: Tensor) -> Tensor:
    return T.channel_scale(xg, T.sigmoid(y))


def mean_of(maps: list[Tensor]) -> Tensor:
    total = maps[0]
    for m in maps[1:]:
        total = T.add(total, m)
    return T.scale(total, 1.0 / len(maps))


def sgse_forward(x: Tensor, w: SgseWeights, cfg: SgseConfig) -> Tensor:
    if x.shape[0] != cfg.channels:
        raise ConfigError(f"input has {x.shape[0]} channels, config expects {cfg.channels}")
    maps = []
    for d in DIRECTIONS:
        parts = [modulate(g, excitation(g, w, d)) for g in group_split(x, d, cfg.groups)]
        maps.append(T.concat(parts, AXIS[d]))
    return mean_of(maps)
