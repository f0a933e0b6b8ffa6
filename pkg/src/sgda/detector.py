"""Desk-scale multi-domain nodule detector built from SGDA residual blocks.

The network is a small residual encoder-decoder over ``(1, D, H, W)``
patches.  SGDA can be switched on per block.  Each dataset gets its own
1x1x1 output head emitting a centre heatmap and a radius map.  A synthetic
generator provides volumes with planted spherical nodules among tubular
vessels, with per-domain intensity, noise and blur shifts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .block import ResidualBlock3D, SgdaConfig, residual_forward
from .ct import PAD_VALUE, Annotation, Volume, extract_patch
from .domain_attention import AssignmentRecord
from .errors import ConfigError, DivergenceError, GenerationError, RoutingError
from .froc import Candidate
from .sgdt import load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor

SGDA_BLOCKS = ("enc1", "enc2", "dec1")
SHARED_HEAD = "shared"

# ---------------------------------------------------------------------------
# synthetic domains

# pre-shift intensities on the windowed 0..255 scale
_PARENCHYMA, _VESSEL, _NODULE = 40.0, 150.0, 165.0


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: str
    gain: float = 1.0
    offset: float = 0.0
    noise: float = 4.0
    vessels: int = 6
    radius_range: tuple[float, float] = (2.5, 4.0)
    nodule_count: tuple[int, int] = (1, 3)
    blur: float = 0.5
    size: int = 48

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"{self.domain_id}: bad radius range {self.radius_range}")
        if not 0 <= self.nodule_count[0] <= self.nodule_count[1]:
            raise ConfigError(f"{self.domain_id}: bad nodule count range {self.nodule_count}")
        if hi * 2 + 4 > 0.7 * self.size:
            raise ConfigError(f"{self.domain_id}: radius {hi} too large for a {self.size}^3 volume")
        if self.size < 16 or self.gain <= 0 or self.noise < 0 or self.blur < 0:
            raise ConfigError(f"{self.domain_id}: invalid size/gain/noise/blur")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_range"], d["nodule_count"] = list(self.radius_range), list(self.nodule_count)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDomainSpec":
        d = dict(d)
        for key in ("radius_range", "nodule_count"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad domain spec: {exc}") from None


DEFAULT_DOMAINS = (
    SyntheticDomainSpec("alpha", gain=1.0, offset=0.0, noise=3.0, vessels=4, blur=0.3),
    SyntheticDomainSpec("beta", gain=0.55, offset=45.0, noise=8.0, vessels=8, blur=1.0),
    SyntheticDomainSpec("gamma", gain=1.3, offset=-25.0, noise=5.0, vessels=6, blur=0.0,
                        radius_range=(3.0, 4.5)),
)


def _lung_mask(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = (n - 1) / 2.0
    semi = np.array([0.42, 0.38, 0.40]) * n
    zz, yy, xx = np.indices((n, n, n), dtype=float)
    r2 = ((zz - c) / semi[0]) ** 2 + ((yy - c) / semi[1]) ** 2 + ((xx - c) / semi[2]) ** 2
    return r2 <= 1.0, np.full(3, c), semi


def _inside_shrunk(p_zyx, centre, semi, margin) -> bool:
    s = semi - margin
    return bool(np.all(s > 0) and np.sum(((p_zyx - centre) / s) ** 2) <= 1.0)


def _draw_ball(img, p_zyx, radius, value):
    lo = np.maximum(np.floor(p_zyx - radius).astype(int), 0)
    hi = np.minimum(np.ceil(p_zyx + radius).astype(int) + 1, img.shape)
    if np.any(hi <= lo):
        return
    z, y, x = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    inside = (z - p_zyx[0]) ** 2 + (y - p_zyx[1]) ** 2 + (x - p_zyx[2]) ** 2 <= radius ** 2
    sub = img[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub[inside] = value


def generate_volume(spec: SyntheticDomainSpec, seed: int, series_id: str | None = None,
                    max_retries: int = 200) -> tuple[Volume, list[Annotation]]:
    """One synthetic scan (u8, 1 mm, origin 0) plus its nodule annotations."""
    rng = np.random.default_rng(seed)
    n = spec.size
    sid = series_id or f"{spec.domain_id}_{seed}"
    mask, centre, semi = _lung_mask(n)
    img = np.full((n, n, n), _PARENCHYMA)

    for _ in range(spec.vessels):
        # quadratic Bezier "pipe" between two lung points
        pts = []
        for _ in range(3):
            for _ in range(max_retries):
                p = centre + rng.uniform(-1, 1, 3) * semi
                if _inside_shrunk(p, centre, semi, 1.0):
                    pts.append(p)
                    break
            else:
                raise GenerationError(f"{sid}: could not place a vessel control point")
        radius = rng.uniform(0.8, 1.6)
        length = np.linalg.norm(pts[2] - pts[0]) + np.linalg.norm(pts[1] - pts[0])
        for t in np.linspace(0, 1, max(int(length * 2), 2)):
            p = (1 - t) ** 2 * pts[0] + 2 * (1 - t) * t * pts[1] + t ** 2 * pts[2]
            _draw_ball(img, p, radius, _VESSEL)

    count = int(rng.integers(spec.nodule_count[0], spec.nodule_count[1] + 1))
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(count):
        r = float(rng.uniform(*spec.radius_range))
        for _ in range(max_retries):
            p = centre + rng.uniform(-1, 1, 3) * semi
            if not _inside_shrunk(p, centre, semi, r + 2):
                continue
            if all(np.linalg.norm(p - q) > r + rq + 3 for q, rq in placed):
                placed.append((p, r))
                break
        else:
            raise GenerationError(f"{sid}: no room for nodule {len(placed) + 1} of {count} "
                                  f"after {max_retries} tries")
    for p, r in placed:
        _draw_ball(img, p, r, _NODULE)

    img = spec.offset + spec.gain * img
    if spec.blur > 0:
        img = ndimage.gaussian_filter(img, spec.blur, mode="nearest")
    img = img + rng.normal(0.0, spec.noise, img.shape)
    vox = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    vox[~mask] = PAD_VALUE
    anns = [Annotation(sid, (float(p[2]), float(p[1]), float(p[0])), 2.0 * r) for p, r in placed]
    return Volume(vox, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), mask), anns


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    datasets: tuple[str, ...]
    channels: tuple[int, int, int] = (8, 16, 32)
    sgda_blocks: tuple[str, ...] = SGDA_BLOCKS
    groups: int = 4
    adapters: int = 3
    reduction: int = 4
    fuse: str = "cross_attention"
    shared_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "sgda_blocks", tuple(b for b in SGDA_BLOCKS if b in self.sgda_blocks))
        if not self.datasets:
            raise ConfigError("at least one dataset head is required")
        if len(set(self.datasets)) != len(self.datasets):
            raise ConfigError(f"duplicate dataset ids: {self.datasets}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"channels must be three positive ints, got {self.channels}")
        for c in self._sgda_channels().values():
            self.sgda_config(c)  # validates

    def _sgda_channels(self) -> dict[str, int]:
        c0, c1, c2 = self.channels
        return {b: {"enc1": c1, "enc2": c2, "dec1": c1}[b] for b in self.sgda_blocks}

    def sgda_config(self, channels: int) -> SgdaConfig:
        return SgdaConfig(channels, self.groups, self.adapters, self.reduction, fuse=self.fuse)

    @property
    def heads(self) -> tuple[str, ...]:
        return (SHARED_HEAD,) if self.shared_head else self.datasets

    @property
    def input_multiple(self) -> int:
        """Spatial extents must be multiples of this for every enabled module."""
        return 8 * self.groups if self.sgda_blocks else 4

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("datasets", "channels", "sgda_blocks"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad network config: {exc}") from None


@dataclass
class Head:
    w_heat: Parameter
    b_heat: Parameter
    w_rad: Parameter
    b_rad: Parameter


class ToyNet:
    def __init__(self, cfg: NetConfig, stem_w, stem_b, blocks: dict, lat: dict, heads: dict):
        self.cfg = cfg
        self.stem_w, self.stem_b = stem_w, stem_b
        self.blocks = blocks     # enc1, enc2, dec1 -> ResidualBlock3D
        self.lat = lat           # lateral 1x1x1 projections: up1 (c2->c1), up0 (c1->c0)
        self.heads = heads

    @classmethod
    def init(cls, cfg: NetConfig, seed: int = 0, dtype=np.float64, prior: float = 0.01) -> "ToyNet":
        rng = np.random.default_rng(seed)
        c0, c1, c2 = cfg.channels

        def uni(shape, fan_in):
            b = math.sqrt(1.0 / fan_in)
            return Parameter(rng.uniform(-b, b, size=shape).astype(dtype))

        def sub_seed():
            return int(rng.integers(2**31))

        stem_w, stem_b = uni((c0, 1, 3, 3, 3), 27), Parameter(np.zeros(c0, dtype))
        sg = cfg._sgda_channels()
        blocks = {
            name: ResidualBlock3D.init(ci, co, stride,
                                       cfg.sgda_config(co) if name in sg else None,
                                       sub_seed(), dtype)
            for name, ci, co, stride in (("enc1", c0, c1, 2), ("enc2", c1, c2, 2), ("dec1", c1, c1, 1))
        }
        lat = {"up1": uni((c1, c2), c2), "up0": uni((c0, c1), c1)}
        bias = math.log(prior / (1.0 - prior))
        heads = {h: Head(uni((1, c0), c0), Parameter(np.full(1, bias, dtype)),
                         uni((1, c0), c0), Parameter(np.zeros(1, dtype))) for h in cfg.heads}
        return cls(cfg, stem_w, stem_b, blocks, lat, heads)

    def named_parameters(self) -> dict[str, Parameter]:
        out = {"stem.w": self.stem_w, "stem.b": self.stem_b}
        for name, blk in self.blocks.items():
            out.update(blk.named_parameters(name))
        out.update({f"lat.{k}": v for k, v in self.lat.items()})
        for h, hd in self.heads.items():
            out.update({f"head.{h}.{k}": getattr(hd, k) for k in ("w_heat", "b_heat", "w_rad", "b_rad")})
        return out

    def head_for(self, dataset_id: str) -> Head:
        if dataset_id not in self.cfg.datasets:
            raise RoutingError(f"no head registered for dataset {dataset_id!r} "
                               f"(known: {', '.join(self.cfg.datasets)})")
        return self.heads[SHARED_HEAD if self.cfg.shared_head else dataset_id]

    def save(self, directory, extra: dict | None = None) -> Path:
        tensors = {k: v.data for k, v in self.named_parameters().items()}
        return save_checkpoint(directory, tensors, {"net": self.cfg.to_dict(), **(extra or {})})

    @classmethod
    def load(cls, directory) -> tuple["ToyNet", dict]:
        tensors, config = load_checkpoint(directory)
        if "net" not in config:
            raise ConfigError(f"{directory}: checkpoint manifest lacks a network config")
        cfg = NetConfig.from_dict(config["net"])
        some = next(iter(tensors.values()))
        net = cls.init(cfg, 0, some.dtype)
        params = net.named_parameters()
        if set(params) != set(tensors):
            missing = sorted(set(params) ^ set(tensors))
            raise ConfigError(f"{directory}: checkpoint tensors do not match config: {missing[:5]}")
        for k, p in params.items():
            if p.shape != tensors[k].shape:
                raise ConfigError(f"{directory}: {k} has shape {tensors[k].shape}, expected {p.shape}")
            p.data[...] = tensors[k]
        return net, config


def normalize(voxels: np.ndarray, dtype=np.float64) -> np.ndarray:
    """u8 windowed intensities -> roughly zero-centred floats, shaped (1, D, H, W)."""
    v = (np.asarray(voxels, dtype) - 128.0) / 64.0
    return v[None] if v.ndim == 3 else v


def forward_detect(net: ToyNet, patch: Tensor, dataset_id: str,
                   recorder: AssignmentRecord | None = None) -> tuple[Tensor, Tensor]:
    """(heatmap, radius map), both ``(1, D, H, W)``; ``patch`` is already normalized."""
    head = net.head_for(dataset_id)
    m = net.cfg.input_multiple
    if patch.ndim != 4 or patch.shape[0] != 1 or any(n % m for n in patch.shape[1:]):
        raise ConfigError(f"patch shape {patch.shape} must be (1, D, H, W) with extents "
                          f"divisible by {m}")
    s = T.conv3d(patch, net.stem_w, net.stem_b)
    e1 = residual_forward(s, net.blocks["enc1"], recorder, "enc1")
    e2 = residual_forward(e1, net.blocks["enc2"], recorder, "enc2")
    d1 = T.add(T.conv1x1x1(T.upsample2(e2), net.lat["up1"]), e1)
    d1 = residual_forward(d1, net.blocks["dec1"], recorder, "dec1")
    d0 = T.relu(T.add(T.conv1x1x1(T.upsample2(d1), net.lat["up0"]), s))
    heat = T.sigmoid(T.channel_bias(T.conv1x1x1(d0, head.w_heat), head.b_heat))
    rad = T.relu(T.channel_bias(T.conv1x1x1(d0, head.w_rad), head.b_rad))
    return heat, rad


# ---------------------------------------------------------------------------
# targets, loss and decoding


def make_targets(shape_zyx, nodules_xyz: Sequence[tuple[tuple[float, float, float], float]]):
    """Gaussian centre heatmap (sigma = radius/2), radius target and positive mask.

    ``nodules_xyz`` holds ``((x, y, z), radius)`` in the patch's voxel frame.
    A voxel is positive when within one sigma of a nodule centre.
    """
    heat = np.zeros(shape_zyx)
    rad = np.zeros(shape_zyx)
    pos = np.zeros(shape_zyx, bool)
    zz, yy, xx = np.indices(shape_zyx, dtype=float)
    for (x, y, z), r in nodules_xyz:
        sigma = r / 2.0
        d2 = (zz - z) ** 2 + (yy - y) ** 2 + (xx - x) ** 2
        g = np.exp(-d2 / (2 * sigma ** 2))
        near = d2 <= sigma ** 2
        closer = near & (g > heat)
        rad[closer] = r
        heat = np.maximum(heat, g)
        pos |= near
    return heat[None], rad[None], pos[None]


def _entropy(t: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(t > 0, t * np.log(t), 0.0) + np.where(t < 1, (1 - t) * np.log1p(-t), 0.0))
    return float(h.mean())


def detection_loss(heat: Tensor, rad: Tensor, nodules_xyz) -> Tensor:
    """Soft-target BCE plus L1 on the radius over positive voxels, weighted 1:1.

    The BCE is offset by the target entropy so a perfect map scores 0, and is
    summed over voxels then divided by the positive-voxel count (at least 1):
    a plain voxel mean lets the background swamp the few nodule voxels.
    """
    t_heat, t_rad, pos = make_targets(heat.shape[1:], nodules_xyz)
    norm = t_heat.size / max(int(pos.sum()), 1)
    ce = T.scale(T.add_scalar(T.bce(heat, t_heat), -_entropy(t_heat)), norm)
    return T.add(ce, T.masked_l1(rad, t_rad, pos))


def decode_candidates(heat: np.ndarray, radius: np.ndarray | None = None, prob_floor: float = 0.05,
                      series_id: str = "", offset=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0),
                      limit=None) -> list[Candidate]:
    """Strict 3x3x3 local maxima at or above ``prob_floor``, highest first.

    Centres are reported in world ``(x, y, z)`` using ``offset``/``spacing``.
    """
    h = np.asarray(heat, float)
    if h.ndim == 4:
        h = h[0]
    if radius is not None and np.shape(radius)[-3:] != h.shape:
        raise ConfigError(f"radius map {np.shape(radius)} does not match heatmap {h.shape}")
    fp = np.ones((3, 3, 3), bool)
    fp[1, 1, 1] = False
    neigh = ndimage.maximum_filter(h, footprint=fp, mode="constant", cval=-np.inf)
    peaks = np.argwhere((h > neigh) & (h >= prob_floor))
    order = np.argsort(-h[tuple(peaks.T)], kind="stable")
    peaks = peaks[order][:limit]
    off, sp = np.asarray(offset, float), np.asarray(spacing, float)
    return [Candidate(series_id, tuple(float(v) for v in off + sp * np.array([x, y, z], float)),
                      float(h[z, y, x])) for z, y, x in peaks]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 8
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] | None = None
    patch: int = 32
    positive_fraction: float = 0.7
    seed: int = 0
    dtype: str = "float32"
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0, momentum in [0, 1), weight_decay >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.milestones is not None:
            object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))

    @property
    def stage_boundaries(self) -> tuple[int, ...]:
        """Epochs at which the learning rate drops x0.1."""
        if self.milestones is not None:
            return self.milestones
        return tuple(sorted({max(1, round(self.epochs * f)) for f in (2 / 3, 0.9)}))

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(epoch >= m for m in self.stage_boundaries)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = None if self.milestones is None else list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


@dataclass
class Scan:
    """A training/evaluation scan: u8 voxels ``[z, y, x]`` plus annotations in its voxel frame."""

    series_id: str
    voxels: np.ndarray
    nodules: list  # ((x, y, z), radius) voxel frame
    offset: tuple = (0.0, 0.0, 0.0)
    spacing: tuple = (1.0, 1.0, 1.0)


def scan_from_volume(v: Volume, anns: Sequence[Annotation], series_id: str) -> Scan:
    sp, off = np.asarray(v.spacing), np.asarray(v.offset)
    nodules = [(tuple((np.asarray(a.center) - off) / sp), a.diameter / 2.0 / float(np.mean(sp)))
               for a in anns if a.series_id == series_id]
    return Scan(series_id, v.voxels, nodules, v.offset, v.spacing)


def sample_patch(rng, scan: Scan, extent: int, positive_fraction: float):
    """A training patch (normalized later) and the nodules whose centres it contains."""
    shape = np.array(scan.voxels.shape)
    if scan.nodules and rng.random() < positive_fraction:
        (x, y, z), _ = scan.nodules[int(rng.integers(len(scan.nodules)))]
        centre = np.array([z, y, x])
        corner = np.floor(centre - extent / 2 + rng.integers(-extent // 4, extent // 4 + 1, 3)).astype(int)
    else:
        corner = np.array([int(rng.integers(-extent // 4, max(n - extent + extent // 4, 1) + 0))
                           for n in shape])
    patch = extract_patch(scan.voxels, tuple(int(c) for c in corner), extent)
    inside = []
    for (x, y, z), r in scan.nodules:
        local = np.array([x, y, z]) - corner[::-1]
        if np.all(local >= 0) and np.all(local < extent):
            inside.append((tuple(float(v) for v in local), r))
    return patch, inside


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, step, lr, loss)

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for e, _, _, loss in self.rows:
            out.setdefault(e, []).append(loss)
        return [float(np.mean(v)) for _, v in sorted(out.items())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "lr", "loss"])
            for e, s, lr, loss in self.rows:
                w.writerow([e, s, repr(float(lr)), repr(float(loss))])


class Sgd:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Parameter], momentum: float, weight_decay: float):
        self.params = params
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params.values()))

    def step(self, lr: float, clip_norm: float | None = None) -> None:
        factor = 1.0
        if clip_norm is not None:
            norm = self.grad_norm()
            if norm > clip_norm:
                factor = clip_norm / norm
        for k, p in self.params.items():
            g = factor * p.grad + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)


def train(net: ToyNet, data: dict[str, Sequence[Scan]], cfg: TrainConfig,
          progress=None) -> TrainLog:
    """Train in place.  Every batch is drawn from one randomly chosen dataset."""
    if not data:
        raise ConfigError("training needs at least one dataset")
    for name, scans in data.items():
        net.head_for(name)
        if not scans:
            raise ConfigError(f"dataset {name!r} has no training scans")
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    params = net.named_parameters()
    opt = Sgd(params, cfg.momentum, cfg.weight_decay)
    names = sorted(data)
    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for _ in range(cfg.steps_per_epoch):
            ds = names[int(rng.integers(len(names)))]
            for p in params.values():
                p.zero_grad()
            total = 0.0
            for _ in range(cfg.batch_size):
                scan = data[ds][int(rng.integers(len(data[ds])))]
                patch, nodules = sample_patch(rng, scan, cfg.patch, cfg.positive_fraction)
                heat, rad = forward_detect(net, Tensor(normalize(patch[0], dtype)), ds)
                loss = detection_loss(heat, rad, nodules)
                value = loss.item()
                if not math.isfinite(value):
                    T.current_tape().clear()
                    raise DivergenceError(step, value)
                total += value
                T.backward(T.scale(loss, 1.0 / cfg.batch_size))
            opt.step(lr, cfg.clip_norm)
            log.rows.append((epoch, step, lr, total / cfg.batch_size))
            if progress is not None:
                progress(epoch, step, lr, total / cfg.batch_size)
            step += 1
    return log


# ---------------------------------------------------------------------------
# inference


def detect_scan(net: ToyNet, scan: Scan, dataset_id: str, recorder: AssignmentRecord | None = None,
                prob_floor: float = 0.05, limit: int | None = 64) -> list[Candidate]:
    """Whole-scan inference: pad with 170 up to a valid extent, run, crop, decode."""
    m = net.cfg.input_multiple
    shape = np.array(scan.voxels.shape)
    padded = (-(-shape // m)) * m
    vox = extract_patch(scan.voxels, (0, 0, 0), int(padded.max()))[0]
    vox = vox[:padded[0], :padded[1], :padded[2]]
    dtype = next(iter(net.named_parameters().values())).dtype
    with T.no_grad():
        heat, rad = forward_detect(net, Tensor(normalize(vox, dtype)), dataset_id, recorder)
    z, y, x = shape
    return decode_candidates(heat.data[0, :z, :y, :x], rad.data[0, :z, :y, :x], prob_floor,
                             scan.series_id, scan.offset, scan.spacing, limit)
