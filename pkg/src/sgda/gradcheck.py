"""Finite-difference verification of taped gradients.

A central difference is only a valid oracle when both probes stay on the
same smooth piece as the base point.  Each probe therefore also records the
ReLU masks / max-pool argmaxes it passes through; a mismatch marks the entry
as a *kink crossing* so a failure can be told apart from a wrong gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass
class ParamCheck:
    name: str
    size: int
    rel_error: float
    kink_crossings: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol

    def row(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:40s} {self.size:6d} {self.rel_error:10.3e} {self.kink_crossings:5d}  {status}"


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central(loss_fn, flat, i, h, base) -> tuple[float, bool]:
    orig = flat[i]
    vals, crossed = [], False
    for step in (h, -h):
        flat[i] = orig + step
        with T.activation_patterns() as pat:
            vals.append(loss_fn().item())
        crossed |= not _same_pattern(base, pat)
    flat[i] = orig
    return (vals[0] - vals[1]) / (2.0 * h), crossed


def check_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Parameter],
                     h: float = 1e-5, tol: float = 1e-6,
                     entries: Mapping[str, np.ndarray] | None = None,
                     backoff: Sequence[float] = ()) -> list[ParamCheck]:
    """Compare backward() against central differences for every named parameter.

    ``entries`` optionally restricts the comparison to flat indices per name.
    When a probe at step ``h`` crosses a kink, the steps in ``backoff`` are
    tried in order for that entry; only entries for which every step crosses
    are counted in ``kink_crossings``.
    """
    for p in params.values():
        p.zero_grad()
    T.backward(loss_fn())
    with T.no_grad(), T.activation_patterns() as base:
        loss_fn()
    results = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if entries is None else np.asarray(entries[name])
        numeric = np.zeros(idx.size)
        crossings = 0
        with T.no_grad():
            for n, i in enumerate(idx):
                for step in (h, *backoff):
                    numeric[n], crossed = _central(loss_fn, flat, i, step, base)
                    if not crossed:
                        break
                crossings += crossed
        analytic = p.grad.reshape(-1)[idx]
        results.append(ParamCheck(name, int(idx.size), T.relative_error(analytic, numeric),
                                  crossings, tol))
    return results


def format_table(results: list[ParamCheck]) -> str:
    head = f"{'parameter':40s} {'size':>6s} {'rel.err':>10s} {'kinks':>5s}  status"
    return "\n".join([head] + [r.row() for r in results])
