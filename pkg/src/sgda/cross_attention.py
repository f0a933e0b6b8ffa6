"""Three-way cross attention over the axial/coronal/sagittal maps.

The axial map supplies queries, the coronal map keys, the sagittal map values.
Keys and values are max-pooled (2x2x2) after embedding.  The attended result
is projected back to ``C`` channels and added to the plain mean of the three
maps.  The grouped variant restricts attention to matching depth slabs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .sgse import mean_of
from .tensor import Parameter, Tensor


@dataclass
class CrossAttnWeights:
    w_theta: Parameter  # C/2 x C
    w_phi: Parameter    # C/2 x C
    w_g: Parameter      # C/2 x C
    w_ca: Parameter     # C x C/2

    @classmethod
    def init(cls, channels: int, rng, dtype=np.float64):
        _check_channels(channels)
        half = channels // 2
        b_in, b_out = np.sqrt(1.0 / channels), np.sqrt(1.0 / half)
        draw = lambda shape, b: Parameter(rng.uniform(-b, b, size=shape).astype(dtype))  # noqa: E731
        return cls(draw((half, channels), b_in), draw((half, channels), b_in),
                   draw((half, channels), b_in), draw((channels, half), b_out))

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64):
        _check_channels(channels)
        half = channels // 2
        z = lambda shape: Parameter(np.zeros(shape, dtype))  # noqa: E731
        return cls(z((half, channels)), z((half, channels)), z((half, channels)), z((channels, half)))

    def named_parameters(self, prefix: str = "ca") -> dict[str, Parameter]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_theta", "w_phi", "w_g", "w_ca")}


@dataclass(frozen=True)
class CrossAttnConfig:
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1:
            raise ConfigError("cross attention needs at least one group")


def _check_channels(channels):
    if channels % 2:
        raise ConfigError(f"cross attention needs an even channel count, got {channels}")


def _check_inputs(xa, xc, xs):
    if not (xa.shape == xc.shape == xs.shape):
        raise DimensionError(f"directional maps differ in shape: {xa.shape}, {xc.shape}, {xs.shape}")
    if xa.ndim != 4:
        raise DimensionError(f"expected C x D x H x W maps, got {xa.shape}")
    _check_channels(xa.shape[0])
    for n, axis in zip(xa.shape[1:], "DHW"):
        if n % 2:
            raise ConfigError(f"cross attention needs even spatial extents, {axis}={n}")


def _embed(xa, xc, xs, w):
    q = T.conv1x1x1(xa, w.w_theta)
    k = T.max_pool3d(T.conv1x1x1(xc, w.w_phi))
    v = T.max_pool3d(T.conv1x1x1(xs, w.w_g))
    return q, k, v


def _attend(q, k, v):
    """softmax(q^T k) v^T for flattened (C/2 x S) q and (C/2 x s) k, v."""
    attn = T.softmax(T.matmul(T.transpose(q), k), axis=1)
    return T.matmul(attn, T.transpose(v))


def cross_attend(xa: Tensor, xc: Tensor, xs: Tensor, w: CrossAttnWeights) -> Tensor:
    _check_inputs(xa, xc, xs)
    C, D, H, W = xa.shape
    half = C // 2
    q, k, v = _embed(xa, xc, xs, w)
    y = _attend(T.reshape(q, (half, D * H * W)),
                T.reshape(k, (half, k.data[0].size)),
                T.reshape(v, (half, v.data[0].size)))
    y = T.reshape(T.transpose(y), (half, D, H, W))
    return T.add(mean_of([xa, xc, xs]), T.conv1x1x1(y, w.w_ca))


def cross_attend_grouped(xa: Tensor, xc: Tensor, xs: Tensor, w: CrossAttnWeights,
                         cfg: CrossAttnConfig) -> Tensor:
    _check_inputs(xa, xc, xs)
    C, D, H, W = xa.shape
    G, half = cfg.groups, C // 2
    if D % G or (D // 2) % G:
        raise ConfigError(f"grouped cross attention: depth {D} (pooled {D // 2}) not divisible by G={G}")
    q, k, v = _embed(xa, xc, xs, w)
    outs = []
    for qi, ki, vi in zip(T.split(q, 1, G), T.split(k, 1, G), T.split(v, 1, G)):
        yi = _attend(T.reshape(qi, (half, qi.data[0].size)),
                     T.reshape(ki, (half, ki.data[0].size)),
                     T.reshape(vi, (half, vi.data[0].size)))
        outs.append(T.reshape(T.transpose(yi), (half, D // G, H, W)))
    y = T.concat(outs, axis=1)
    return T.add(mean_of([xa, xc, xs]), T.conv1x1x1(y, w.w_ca))


def attention_maps(xa: Tensor, xc: Tensor, w: CrossAttnWeights, groups: int = 1) -> list[np.ndarray]:
    """The per-group attention matrices (rows = query voxels), for inspection."""
    with T.no_grad():
        C = xa.shape[0]
        q = T.conv1x1x1(xa, w.w_theta)
        k = T.max_pool3d(T.conv1x1x1(xc, w.w_phi))
        maps = []
        for qi, ki in zip(T.split(q, 1, groups), T.split(k, 1, groups)):
            qf = qi.data.reshape(C // 2, -1)
            kf = ki.data.reshape(C // 2, -1)
            maps.append(T.softmax(Tensor(qf.T @ kf), axis=1).data)
        return maps
