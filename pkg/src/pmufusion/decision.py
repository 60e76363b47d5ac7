"""Event flags from (e_recon, e_d) points: weighted threshold or convex hull."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

DEGENERATE_TOL = 1e-12
CCW_ERRBOUND = 3.3306690738754716e-16  # (3 + 16 eps) eps, float orientation error bound


class TuningError(ValueError):
    pass


def _points(errors) -> np.ndarray:
    p = np.asarray(errors, dtype=np.float64)
    return p.reshape(-1, 2)


@dataclass
class ThresholdRule:
    lambda_recon: float = 1.0
    lambda_d: float = 1.0
    eta1: float = 0.0

    def __post_init__(self):
        if self.lambda_recon < 0 or self.lambda_d < 0:
            raise ValueError("weights must be non-negative")
        if self.lambda_recon == 0 and self.lambda_d == 0:
            raise ValueError("at least one weight must be positive")

    def score(self, errors) -> np.ndarray:
        p = _points(errors)
        return self.lambda_recon * p[:, 0] + self.lambda_d * p[:, 1]

    def flags(self, errors, windows=None) -> np.ndarray:
        return (self.score(errors) > self.eta1).astype(np.int64)


def detect_threshold(errors, rule: ThresholdRule) -> int:
    return int(rule.flags(errors)[0])


def _cross(o, a, b) -> float:
    """Orientation of (o, a, b); exact when the float result is within rounding of zero."""
    left = (a[0] - o[0]) * (b[1] - o[1])
    right = (a[1] - o[1]) * (b[0] - o[0])
    det = left - right
    if abs(det) > CCW_ERRBOUND * (abs(left) + abs(right)):
        return det
    o, a, b = ([Fraction(c) for c in p] for p in (o, a, b))
    exact = (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    return float((exact > 0) - (exact < 0))


def monotone_chain(points) -> list[tuple[float, float]]:
    """Counter-clockwise hull vertices with collinear points dropped."""
    pts = sorted(set(map(tuple, _points(points).tolist())))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


@dataclass
class ConvexHullRegion:
    vertices: np.ndarray  # (k, 2), counter-clockwise
    degenerate: bool = False
    inflation: float = 1.0

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        if self.degenerate:
            return v.mean(axis=0)
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        c = x * yn - xn * y
        a = c.sum() / 2.0
        return np.array([((x + xn) * c).sum(), ((y + yn) * c).sum()]) / (6.0 * a)

    @property
    def area(self) -> float:
        if self.degenerate:
            return 0.0
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def contains(self, errors) -> np.ndarray:
        """Boolean mask: inside or on the boundary."""
        p = _points(errors)
        v = self.vertices
        if self.degenerate:
            return _near_degenerate(p, v)
        a = v
        b = np.roll(v, -1, axis=0)
        e = b - a  # (k, 2)
        rel = p[:, None, :] - a[None, :, :]  # (n, k, 2)
        cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
        # scale-aware slack so points on an edge are not lost to rounding
        scale = np.hypot(e[:, 0], e[:, 1])[None, :] * (np.abs(rel).max(axis=2) + np.abs(a).max(axis=1)[None, :])
        return np.all(cross >= -DEGENERATE_TOL * scale, axis=1)

    def flags(self, errors, windows=None) -> np.ndarray:
        return (~self.contains(errors)).astype(np.int64)


def _near_degenerate(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    length = float(np.hypot(*(v[-1] - v[0]))) if v.shape[0] > 1 else 0.0
    if length == 0.0:
        d = np.hypot(*(p - v[0]).T)
    else:
        # project on the unit direction; ab @ ab can underflow for tiny segments
        a = v[0]
        u = (v[-1] - a) / length
        s = np.clip((p - a) @ u, 0.0, length)
        d = np.hypot(*(p - (a + s[:, None] * u)).T)
    return d <= DEGENERATE_TOL * max(1.0, float(np.abs(v).max()))


def build_hull(normal_points, inflation: float = 1.0) -> ConvexHullRegion:
    """Convex hull of the normal-operation error points.

    With ``inflation`` != 1 the vertices are scaled about the hull centroid.
    Collinear or coincident inputs give a flagged degenerate region.
    """
    pts = _points(normal_points)
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    hull = np.array(monotone_chain(pts), dtype=np.float64)
    if hull.shape[0] < 3:
        region = ConvexHullRegion(hull, degenerate=True, inflation=inflation)
    else:
        region = ConvexHullRegion(hull, degenerate=False, inflation=inflation)
    if inflation != 1.0:
        c = region.centroid
        region.vertices = c + inflation * (region.vertices - c)
    return region


def detect_hull(errors, region: ConvexHullRegion) -> int:
    return int(region.flags(errors)[0])


def accuracy_curve(scores: np.ndarray, labels: np.ndarray, grid: Sequence[float]) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0
    g = np.asarray(grid, dtype=np.float64)
    pred = scores[None, :] > g[:, None]
    return (pred == labels[None, :]).mean(axis=1)


def tune_threshold(errors, labels, rule: ThresholdRule, grid: Sequence[float]) -> tuple[float, float]:
    """Grid value of eta1 with the best detection accuracy, and that accuracy.

    Ties go to the smaller threshold.
    """
    labels = np.asarray(labels)
    if len(grid) == 0:
        raise TuningError("empty grid")
    if np.unique(labels > 0).size < 2:
        raise TuningError("validation set must contain both normal and event samples")
    g = np.sort(np.asarray(grid, dtype=np.float64))
    acc = accuracy_curve(rule.score(errors), labels, g)
    k = int(np.argmax(acc))  # first maximum -> smallest eta1
    return float(g[k]), float(acc[k])


def save_hull(region: ConvexHullRegion, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["e_recon", "e_d"])
        for x, y in region.vertices:
            w.writerow([repr(float(x)), repr(float(y))])


def load_hull(path) -> ConvexHullRegion:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    v = np.array([[float(a), float(b)] for a, b in rows]).reshape(-1, 2)
    return ConvexHullRegion(v, degenerate=v.shape[0] < 3)


def save_rule(rule: ThresholdRule, path) -> None:
    Path(path).write_text(
        f"lambda_recon = {rule.lambda_recon!r}\nlambda_d = {rule.lambda_d!r}\neta1 = {rule.eta1!r}\n"
    )


def load_rule(path) -> ThresholdRule:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            kv[k.strip()] = float(v)
    return ThresholdRule(kv["lambda_recon"], kv["lambda_d"], kv["eta1"])
