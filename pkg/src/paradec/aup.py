"""Accuracy Under Parallelism (AUP).

AUP summarises an accuracy-parallelism curve as a weighted area: points are
sorted by parallelism (tokens per forward), points that fall more than
``margin`` accuracy points below the lowest-parallelism point are dropped, and
each remaining accuracy is discounted by ``W(y) = min(exp(-alpha*(1 - y/y_max)), 1)``
before trapezoidal integration. The leading ``rho_1 * y_1`` term is unweighted.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class AupError(ValueError):
    pass


class EmptyCurveError(AupError):
    pass


class InvalidPointError(AupError):
    pass


class InvalidParameterError(AupError):
    pass


class CurveParseError(AupError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, order=True)
class CurvePoint:
    rho: float
    acc: float

    def check(self) -> None:
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise InvalidPointError(f"rho must be a positive finite number, got {self.rho!r}")
        if not (0.0 <= self.acc <= 100.0):
            raise InvalidPointError(f"acc must lie in [0, 100], got {self.acc!r}")


@dataclass(frozen=True)
class AupConfig:
    alpha: float = 3.0
    y_max_override: float | None = None
    margin: float = 5.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidParameterError(f"alpha must be > 0, got {self.alpha!r}")
        if not self.margin >= 0:
            raise InvalidParameterError(f"margin must be >= 0, got {self.margin!r}")
        if self.y_max_override is not None and not (0 < self.y_max_override <= 100):
            raise InvalidParameterError(
                f"y_max_override must lie in (0, 100], got {self.y_max_override!r}"
            )


@dataclass
class AupResult:
    score: float
    included: list[CurvePoint]
    excluded: list[CurvePoint]
    y_max_used: float
    alpha: float = 3.0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "alpha": self.alpha,
            "y_max_used": self.y_max_used,
            "points_included": [[p.rho, p.acc] for p in self.included],
            "points_excluded": [[p.rho, p.acc] for p in self.excluded],
            "warnings": list(self.warnings),
        }


def _as_points(points: Iterable) -> list[CurvePoint]:
    out = []
    for p in points:
        out.append(p if isinstance(p, CurvePoint) else CurvePoint(float(p[0]), float(p[1])))
    return out


def weight(y: float, alpha: float, y_max: float) -> float:
    """Accuracy weight in (0, 1]; equals 1 at or above ``y_max``."""
    if not y_max > 0:
        raise InvalidParameterError(f"y_max must be > 0, got {y_max!r}")
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be > 0, got {alpha!r}")
    return min(math.exp(-alpha * (1.0 - y / y_max)), 1.0)


def filter_curve(
    points: Sequence[CurvePoint], margin: float = 5.0
) -> tuple[list[CurvePoint], list[CurvePoint]]:
    """Split rho-sorted points into (included, excluded) by ``y_min = y_1 - margin``."""
    if not points:
        raise EmptyCurveError("curve has no points")
    y_min = points[0].acc - margin
    included, excluded = [points[0]], []
    for p in points[1:]:
        (included if p.acc >= y_min else excluded).append(p)
    return included, excluded


def _dedupe(points: list[CurvePoint]) -> tuple[list[CurvePoint], list[CurvePoint], list[str]]:
    kept: list[CurvePoint] = []
    dropped: list[CurvePoint] = []
    warnings = []
    for p in points:
        if kept and kept[-1].rho == p.rho:
            loser, winner = sorted((kept[-1], p), key=lambda q: q.acc)
            kept[-1] = winner
            dropped.append(loser)
            warnings.append(
                f"duplicate rho={p.rho:g}: kept acc={winner.acc:g}, dropped acc={loser.acc:g}"
            )
        else:
            kept.append(p)
    return kept, dropped, warnings


def compute_aup(points: Iterable, config: AupConfig | None = None) -> AupResult:
    config = config or AupConfig()
    pts = _as_points(points)
    if not pts:
        raise EmptyCurveError("curve has no points")
    for p in pts:
        p.check()

    pts.sort()
    pts, duplicates, warnings = _dedupe(pts)
    included, excluded = filter_curve(pts, config.margin)
    # Collapsed duplicates are reported as excluded so included + excluded covers the input.
    excluded = sorted(excluded + duplicates)

    y_max = config.y_max_override
    if y_max is None:
        y_max = max(p.acc for p in included)

    def weighted(y: float) -> float:
        if y_max <= 0:
            return 0.0  # every included accuracy is 0
        return y * weight(y, config.alpha, y_max)

    first = included[0]
    score = first.rho * first.acc
    for prev, cur in zip(included, included[1:]):
        score += (cur.rho - prev.rho) * (weighted(cur.acc) + weighted(prev.acc)) / 2.0

    return AupResult(
        score=score,
        included=included,
        excluded=excluded,
        y_max_used=y_max,
        alpha=config.alpha,
        warnings=warnings,
    )


def alpha_sweep(
    points: Iterable, alphas: Sequence[float], config: AupConfig | None = None
) -> list[tuple[float, float]]:
    if not alphas:
        raise InvalidParameterError("alphas must be non-empty")
    config = config or AupConfig()
    pts = _as_points(points)
    return [
        (a, compute_aup(pts, AupConfig(a, config.y_max_override, config.margin)).score)
        for a in alphas
    ]


def parse_curve(text: str) -> list[CurvePoint]:
    """Parse ``rho,acc`` CSV text. File order is preserved."""
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or [h.strip() for h in header] != ["rho", "acc"]:
        raise CurveParseError(1, "expected header 'rho,acc'")
    points = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise CurveParseError(lineno, f"expected 2 fields, got {len(row)}")
        try:
            rho, acc = float(row[0]), float(row[1])
        except ValueError:
            raise CurveParseError(lineno, f"non-numeric field in {row!r}") from None
        point = CurvePoint(rho, acc)
        try:
            point.check()
        except InvalidPointError as exc:
            raise CurveParseError(lineno, str(exc)) from None
        points.append(point)
    return points


def format_curve(points: Iterable[CurvePoint]) -> str:
    lines = ["rho,acc"]
    lines += [f"{p.rho!r},{p.acc!r}" for p in _as_points(points)]
    return "\n".join(lines) + "\n"
