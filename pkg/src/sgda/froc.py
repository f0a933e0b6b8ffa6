"""Candidate matching and FROC scoring.

A nodule counts as found when an accepted candidate lies within its radius
(inclusive).  Accepted candidates inside any nodule's radius are absorbed,
so duplicates never become false positives.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ct import Annotation
from .errors import DataError, ParseError

OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
CANDIDATE_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "probability"]


@dataclass(frozen=True)
class Candidate:
    series_id: str
    center: tuple[float, float, float]
    probability: float

    def __post_init__(self):
        if not (np.isfinite(self.probability) and 0.0 <= self.probability <= 1.0):
            raise DataError(f"{self.series_id}: probability {self.probability} not in [0, 1]")


@dataclass
class MatchResult:
    hits: set            # (series_id, nodule index)
    fp_count: int
    detail: dict = field(default_factory=dict)   # series -> {"hits", "fps", "absorbed"}
    unknown_series: list = field(default_factory=list)


@dataclass
class FrocResult:
    sensitivities: tuple[float, ...]
    average: float
    curve: list[tuple[float, float, float]]  # (threshold, fp_per_scan, sensitivity)
    operating_points: tuple[float, ...] = OPERATING_POINTS


def _group(items: Iterable, key=lambda o: o.series_id) -> dict[str, list]:
    out: dict[str, list] = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def _within(c: Candidate, a: Annotation) -> bool:
    return float(np.linalg.norm(np.subtract(c.center, a.center))) <= a.diameter / 2.0


def _check_series(cands: Sequence[Candidate], anns: Sequence[Annotation],
                  series: Iterable[str] | None, strict: bool) -> list[str]:
    known = set(series) if series is not None else {a.series_id for a in anns}
    known |= {a.series_id for a in anns}
    unknown = sorted({c.series_id for c in cands} - known)
    if unknown and strict:
        raise DataError(f"candidates reference unknown series: {', '.join(unknown)}")
    return unknown


def match(cands: Sequence[Candidate], anns: Sequence[Annotation], threshold: float,
          series: Iterable[str] | None = None, strict: bool = False) -> MatchResult:
    """Match candidates with probability >= ``threshold`` against annotations."""
    unknown = _check_series(cands, anns, series, strict)
    by_scan = _group(anns)
    hits, fp, detail = set(), 0, {}
    for sid, group in sorted(_group(c for c in cands if c.probability >= threshold).items()):
        nodules = by_scan.get(sid, [])
        d = detail.setdefault(sid, {"hits": 0, "fps": 0, "absorbed": 0})
        for c in group:
            inside = [i for i, a in enumerate(nodules) if _within(c, a)]
            if inside:
                d["absorbed"] += 1
                hits.update((sid, i) for i in inside)
            else:
                d["fps"] += 1
                fp += 1
        d["hits"] = sum(1 for s, _ in hits if s == sid)
    return MatchResult(hits, fp, detail, unknown)


def _sensitivity_at(curve, t: float) -> float:
    best = 0.0
    for _, fpr, sens in curve:
        if fpr <= t:
            best = max(best, sens)
    return best


def _summarize(curve) -> FrocResult:
    sens = tuple(_sensitivity_at(curve, t) for t in OPERATING_POINTS)
    return FrocResult(sens, float(np.mean(sens)) if sens else 0.0, curve)


def froc(cands: Sequence[Candidate], anns: Sequence[Annotation], scan_count: int,
         series: Iterable[str] | None = None, strict: bool = False) -> FrocResult:
    """Sweep the distinct candidate probabilities from high to low.

    Each nodule is found from the threshold equal to the best probability among
    candidates inside it; each candidate outside every nodule is a false positive
    from its own probability down.  Ties enter together.
    """
    if scan_count < 1:
        raise DataError("scan_count must be at least 1")
    total = len(anns)
    if total == 0:
        raise DataError("no annotated nodules: sensitivity is undefined")
    _check_series(cands, anns, series, strict)
    by_scan = _group(anns)
    found_at = {}
    fp_probs = []
    for c in cands:
        inside = [i for i, a in enumerate(by_scan.get(c.series_id, [])) if _within(c, a)]
        if not inside:
            fp_probs.append(c.probability)
        for i in inside:
            key = (c.series_id, i)
            found_at[key] = max(found_at.get(key, -1.0), c.probability)
    hit_probs = np.sort(np.fromiter(found_at.values(), float, len(found_at)))
    fp_sorted = np.sort(np.asarray(fp_probs, float))
    curve = []
    for t in sorted({c.probability for c in cands}, reverse=True):
        hits = hit_probs.size - np.searchsorted(hit_probs, t, side="left")
        fps = fp_sorted.size - np.searchsorted(fp_sorted, t, side="left")
        curve.append((float(t), fps / scan_count, hits / total))
    return _summarize(curve)


# ---------------------------------------------------------------------------
# files


def write_candidates(path, cands: Sequence[Candidate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANDIDATE_HEADER)
        for c in cands:
            w.writerow([c.series_id, *(repr(float(v)) for v in c.center), repr(float(c.probability))])


def read_candidates(path) -> list[Candidate]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != CANDIDATE_HEADER:
        raise ParseError(f"{path}: header must be {','.join(CANDIDATE_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 5:
            raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
        try:
            nums = [float(v) for v in row[1:]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric field") from None
        try:
            out.append(Candidate(row[0].strip(), tuple(nums[:3]), nums[3]))
        except DataError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return out


def format_curve(result: FrocResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fp_per_scan", "sensitivity"])
    for row in result.curve:
        w.writerow([repr(float(v)) for v in row])
    w.writerow([])
    w.writerow(["operating_point", "sensitivity"])
    for t, s in zip(result.operating_points, result.sensitivities):
        w.writerow([repr(float(t)), repr(float(s))])
    w.writerow(["average", repr(float(result.average))])
    return buf.getvalue()


def emit_curve(result: FrocResult, path) -> None:
    Path(path).write_text(format_curve(result))


def parse_curve(path) -> FrocResult:
    text = Path(path).read_text()
    try:
        head, summary = text.split("\n\n", 1)
        curve_rows = list(csv.reader(io.StringIO(head)))[1:]
        curve = [tuple(float(v) for v in r) for r in curve_rows]
        rows = list(csv.reader(io.StringIO(summary)))
        points = [(float(a), float(b)) for a, b in rows[1:-1]]
        if rows[-1][0] != "average":
            raise ValueError("missing average row")
        average = float(rows[-1][1])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed curve file: {exc}") from None
    return FrocResult(tuple(s for _, s in points), average, curve, tuple(t for t, _ in points))


def annotations_by_series(anns: Sequence[Annotation]) -> Mapping[str, list[Annotation]]:
    return _group(anns)
