"""Universal SGSE adapter bank with soft per-group domain assignment."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .sgse import AXIS, DIRECTIONS, SgseWeights, excitation, group_split, modulate
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class BankConfig:
    channels: int
    groups: int = 1
    reduction: int = 16
    adapters: int = 3

    def __post_init__(self):
        if self.adapters < 1:
            raise ConfigError("need at least one adapter")
        if self.channels % self.reduction:
            raise ConfigError(f"channels {self.channels} not divisible by reduction {self.reduction}")


@dataclass
class BankWeights:
    adapters: list[SgseWeights]
    assign: dict[str, Parameter]  # direction -> N x C

    @classmethod
    def init(cls, cfg: BankConfig, rng, directions=DIRECTIONS, dtype=np.float64):
        adapters = [SgseWeights.init(cfg.channels, cfg.reduction, rng, directions, dtype)
                    for _ in range(cfg.adapters)]
        # zero assignment => uniform routing at start
        assign = {d: Parameter(np.zeros((cfg.adapters, cfg.channels), dtype)) for d in directions}
        return cls(adapters, assign)

    @property
    def directions(self) -> tuple[str, ...]:
        return tuple(d for d in DIRECTIONS if d in self.assign)

    def named_parameters(self, prefix: str = "bank") -> dict[str, Parameter]:
        out = {}
        for j, adapter in enumerate(self.adapters):
            out.update(adapter.named_parameters(f"{prefix}.{j}"))
        for d in self.directions:
            out[f"{prefix}.assign.{d}"] = self.assign[d]
        return out


def bank_project(xg: Tensor, w: BankWeights, direction: str) -> Tensor:
    """Stack every adapter's excitation as columns of a C x N matrix."""
    C = xg.shape[0]
    cols = [T.reshape(excitation(xg, a, direction), (C, 1)) for a in w.adapters]
    return cols[0] if len(cols) == 1 else T.concat(cols, axis=1)


def assign(xg: Tensor, w_da: Tensor) -> Tensor:
    C = xg.shape[0]
    pooled = T.reshape(T.global_avg_pool3d(xg), (C, 1))
    logits = T.reshape(T.matmul(w_da, pooled), (w_da.shape[0],))
    return T.softmax(logits, axis=0)


def domain_modulate_group(xg: Tensor, w: BankWeights, direction: str) -> tuple[Tensor, Tensor]:
    uni = bank_project(xg, w, direction)
    weights = assign(xg, w.assign[direction])
    n = weights.shape[0]
    y = T.reshape(T.matmul(uni, T.reshape(weights, (n, 1))), (xg.shape[0],))
    return modulate(xg, y), weights


def directional_forward(x: Tensor, w: BankWeights, cfg: BankConfig,
                        recorder: "AssignmentRecord | None" = None, module: str = "sgda",
                        directions: Sequence[str] | None = None) -> dict[str, Tensor]:
    """Modulated map per direction, keyed by direction name."""
    if x.shape[0] != cfg.channels:
        raise ConfigError(f"input has {x.shape[0]} channels, config expects {cfg.channels}")
    out = {}
    for d in directions or w.directions:
        parts = []
        for i, g in enumerate(group_split(x, d, cfg.groups)):
            mod, weights = domain_modulate_group(g, w, d)
            parts.append(mod)
            if recorder is not None:
                recorder.add(module, d, i, weights.data)
        out[d] = T.concat(parts, AXIS[d])
    return out


class AssignmentRecord:
    """Running mean of soft assignments per (dataset, module, direction, group).

    Set :attr:`dataset` to the tag of the data being processed before each
    forward pass.  Not thread-safe; use one record per worker and :meth:`merge`.
    """

    def __init__(self, dataset: str = "default"):
        self.dataset = dataset
        self._sums: dict[tuple, np.ndarray] = {}
        self._counts: dict[tuple, int] = defaultdict(int)

    def add(self, module: str, direction: str, group: int, weights) -> None:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if not np.isclose(w.sum(), 1.0, atol=1e-6) or (w < 0).any():
            raise NumericError(f"assignment {w} is not a probability vector")
        key = (self.dataset, module, direction, int(group))
        if key in self._sums:
            self._sums[key] = self._sums[key] + w
        else:
            self._sums[key] = w.copy()
        self._counts[key] += 1

    def merge(self, other: "AssignmentRecord") -> "AssignmentRecord":
        for key, s in other._sums.items():
            self._sums[key] = self._sums[key] + s if key in self._sums else s.copy()
            self._counts[key] += other._counts[key]
        return self

    def mean(self, dataset, module, direction, group) -> np.ndarray:
        key = (dataset, module, direction, group)
        return self._sums[key] / self._counts[key]

    def export(self) -> list[dict]:
        order = {d: k for k, d in enumerate(DIRECTIONS)}
        keys = sorted(self._sums, key=lambda k: (k[1], order.get(k[2], 9), k[3], k[0]))
        return [{"module": m, "direction": d, "group": g, "dataset": ds,
                 "mean_weights": (self._sums[(ds, m, d, g)] / self._counts[(ds, m, d, g)]).tolist(),
                 "samples": self._counts[(ds, m, d, g)]}
                for ds, m, d, g in keys]

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.export(), fh, indent=2)
            fh.write("\n")
