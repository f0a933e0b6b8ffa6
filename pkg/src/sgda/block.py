"""SGDA module assembly, residual blocks and parameter accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cross_attention import CrossAttnConfig, CrossAttnWeights, cross_attend, cross_attend_grouped
from .domain_attention import AssignmentRecord, BankConfig, BankWeights, directional_forward
from .errors import ConfigError, DimensionError
from .sgse import DIRECTIONS, mean_of
from .tensor import Parameter, Tensor

FUSE_MODES = ("mean_only", "cross_attention")


@dataclass(frozen=True)
class SgdaConfig:
    channels: int
    groups: int = 4
    adapters: int = 3
    reduction: int = 16
    directions: tuple[str, ...] = DIRECTIONS
    fuse: str = "cross_attention"
    grouped_ca: bool = True

    def __post_init__(self):
        object.__setattr__(self, "directions",
                           tuple(d for d in DIRECTIONS if d in tuple(self.directions)))
        if not self.directions:
            raise ConfigError("at least one direction must be enabled")
        if self.fuse not in FUSE_MODES:
            raise ConfigError(f"fuse must be one of {FUSE_MODES}, got {self.fuse!r}")
        if self.channels % self.reduction:
            raise ConfigError(f"channels {self.channels} not divisible by reduction {self.reduction}")
        if self.groups < 1 or self.adapters < 1:
            raise ConfigError("groups and adapters must be >= 1")
        if self.fuse == "cross_attention" and len(self.directions) == 2:
            raise ConfigError("cross attention fuses exactly three directional maps")
        if self.uses_cross_attention and self.channels % 2:
            raise ConfigError("cross attention needs an even channel count")

    @property
    def uses_cross_attention(self) -> bool:
        return self.fuse == "cross_attention" and len(self.directions) == 3

    @property
    def bank(self) -> BankConfig:
        return BankConfig(self.channels, self.groups, self.reduction, self.adapters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["directions"] = list(self.directions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SgdaConfig":
        d = dict(d)
        if "directions" in d:
            d["directions"] = tuple(d["directions"])
        return cls(**d)


@dataclass
class SgdaParams:
    bank: BankWeights
    ca: CrossAttnWeights | None = None

    def named_parameters(self, prefix: str = "sgda") -> dict[str, Parameter]:
        out = self.bank.named_parameters(f"{prefix}.bank")
        if self.ca is not None:
            out.update(self.ca.named_parameters(f"{prefix}.ca"))
        return out


def init_params(cfg: SgdaConfig, seed: int = 0, dtype=np.float64) -> SgdaParams:
    rng = np.random.default_rng(seed)
    bank = BankWeights.init(cfg.bank, rng, cfg.directions, dtype)
    ca = CrossAttnWeights.init(cfg.channels, rng, dtype) if cfg.uses_cross_attention else None
    return SgdaParams(bank, ca)


def zero_params(cfg: SgdaConfig, dtype=np.float64) -> SgdaParams:
    p = init_params(cfg, 0, dtype)
    for param in p.named_parameters().values():
        param.data[...] = 0.0
    return p


def sgda_forward(x: Tensor, p: SgdaParams, cfg: SgdaConfig,
                 recorder: AssignmentRecord | None = None, module: str = "sgda") -> Tensor:
    maps = directional_forward(x, p.bank, cfg.bank, recorder, module, cfg.directions)
    if len(cfg.directions) == 1:
        return maps[cfg.directions[0]]
    ordered = [maps[d] for d in cfg.directions]
    if not cfg.uses_cross_attention:
        return mean_of(ordered)
    xa, xc, xs = ordered
    if cfg.grouped_ca:
        return cross_attend_grouped(xa, xc, xs, p.ca, CrossAttnConfig(cfg.groups))
    return cross_attend(xa, xc, xs, p.ca)


def parameter_count(cfg: SgdaConfig) -> int:
    C, n_dir = cfg.channels, len(cfg.directions)
    bank = n_dir * cfg.adapters * 2 * C * C // cfg.reduction
    assignment = n_dir * cfg.adapters * C
    ca = 2 * C * C if cfg.uses_cross_attention else 0
    return bank + assignment + ca


# ---------------------------------------------------------------------------
# residual block


@dataclass
class ResidualBlock3D:
    """Pre-activation block: relu-conv-relu-conv [-> SGDA] + shortcut."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    stride: int = 1
    proj: Parameter | None = None
    sgda: SgdaParams | None = None
    sgda_cfg: SgdaConfig | None = field(default=None)

    @classmethod
    def init(cls, c_in: int, c_out: int, stride: int = 1, sgda_cfg: SgdaConfig | None = None,
             seed: int = 0, dtype=np.float64, gain: float = 1.0):
        rng = np.random.default_rng(seed)

        def conv(co, ci):
            b = gain * np.sqrt(1.0 / (ci * 27))
            return Parameter(rng.uniform(-b, b, size=(co, ci, 3, 3, 3)).astype(dtype))

        w1, w2 = conv(c_out, c_in), conv(c_out, c_out)
        proj = None
        if stride != 1 or c_in != c_out:
            b = np.sqrt(1.0 / c_in)
            proj = Parameter(rng.uniform(-b, b, size=(c_out, c_in)).astype(dtype))
        sgda = None
        if sgda_cfg is not None:
            if sgda_cfg.channels != c_out:
                raise ConfigError(f"SGDA channels {sgda_cfg.channels} != block output {c_out}")
            sgda = init_params(sgda_cfg, int(rng.integers(2**31)), dtype)
        return cls(w1, Parameter(np.zeros(c_out, dtype)), w2, Parameter(np.zeros(c_out, dtype)),
                   stride, proj, sgda, sgda_cfg)

    def named_parameters(self, prefix: str = "block") -> dict[str, Parameter]:
        out = {f"{prefix}.conv1.w": self.w1, f"{prefix}.conv1.b": self.b1,
               f"{prefix}.conv2.w": self.w2, f"{prefix}.conv2.b": self.b2}
        if self.proj is not None:
            out[f"{prefix}.proj"] = self.proj
        if self.sgda is not None:
            out.update(self.sgda.named_parameters(f"{prefix}.sgda"))
        return out


def residual_forward(x: Tensor, block: ResidualBlock3D, recorder: AssignmentRecord | None = None,
                     module: str = "block") -> Tensor:
    if x.ndim != 4 or x.shape[0] != block.w1.shape[1]:
        raise DimensionError(f"block expects {block.w1.shape[1]} input channels, got shape {x.shape}")
    h = T.conv3d(T.relu(x), block.w1, block.b1, stride=block.stride)
    h = T.conv3d(T.relu(h), block.w2, block.b2)
    if block.sgda is not None:
        h = sgda_forward(h, block.sgda, block.sgda_cfg, recorder, module)
    if block.proj is None:
        shortcut = x
    else:
        shortcut = T.conv1x1x1(T.downsample2(x) if block.stride == 2 else x, block.proj)
    return T.add(h, shortcut)
