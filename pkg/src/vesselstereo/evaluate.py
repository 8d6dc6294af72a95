"""Relative depth error of a reconstruction against ground-truth points."""
from __future__ import annotations

import io
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.5)


def associate(points, gt, chunk: int = 2048):
    """Nearest ground-truth point in (x, y) for every reconstructed point.

    Many reconstructed points may share one ground-truth point. Equal
    distances resolve to the smallest ground-truth index.

    Returns:
        ``(indices, distances)`` arrays, one entry per reconstructed point.
    """
    p = np.asarray(points, dtype=float)
    q = np.asarray(gt, dtype=float)
    if p.ndim != 2 or q.ndim != 2 or len(p) == 0 or len(q) == 0:
        raise ParameterError("associate needs two non-empty point sets")
    p, q = p[:, :2], q[:, :2]
    idx = np.empty(len(p), dtype=np.intp)
    dist = np.empty(len(p))
    for s in range(0, len(p), chunk):
        d2 = ((p[s:s + chunk, None, :] - q[None, :, :]) ** 2).sum(axis=-1)
        k = np.argmin(d2, axis=1)
        idx[s:s + chunk] = k
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(k)), k])
    return idx, dist


@dataclass
class Histogram:
    bin_width: float
    edges: np.ndarray
    counts: np.ndarray
    cumulative: np.ndarray
    """Fraction of points at or below each bin's upper edge."""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "cumulative_fraction"])
        for k, c in enumerate(self.counts):
            w.writerow([repr(float(self.edges[k])), repr(float(self.edges[k + 1])), int(c),
                        repr(float(self.cumulative[k]))])
        return buf.getvalue()

    def to_table(self) -> list[dict]:
        return [{"bin_lo": float(self.edges[k]), "bin_hi": float(self.edges[k + 1]),
                 "count": int(c), "cumulative_fraction": float(self.cumulative[k])}
                for k, c in enumerate(self.counts)]


def error_histogram(errors, bin_width: float = 0.05) -> Histogram:
    """Counts per ``[k*w, (k+1)*w)`` bin, from bin 0 to the bin holding the largest error."""
    if not bin_width > 0:
        raise ParameterError(f"bin_width must be > 0, got {bin_width}")
    e = np.asarray(errors, dtype=float).ravel()
    if (e < 0).any() or not np.isfinite(e).all():
        raise ParameterError("errors must be finite and >= 0")
    k = np.floor(e / bin_width).astype(np.int64)
    nbins = int(k.max()) + 1 if e.size else 1
    counts = np.bincount(k, minlength=nbins)
    edges = bin_width * np.arange(nbins + 1)
    cum = np.cumsum(counts) / e.size if e.size else np.zeros(nbins)
    return Histogram(bin_width, edges, counts, cum)


@dataclass
class ErrorReport:
    ids: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    errors: np.ndarray
    rms_error: float
    fraction_under: dict
    histogram: Histogram
    excluded: int = 0
    association_distance: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return int(self.errors.size)

    def per_point_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point_id", "depth", "gt", "error"])
        for i, d, g, e in zip(self.ids.tolist(), self.depth.tolist(), self.gt.tolist(), self.errors.tolist()):
            w.writerow([i, repr(d), repr(g), repr(e)])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "points": self.count,
            "excluded": self.excluded,
            "rms_error": self.rms_error,
            "fraction_under": {repr(float(k)): v for k, v in self.fraction_under.items()},
            "histogram": self.histogram.to_table(),
        }
        if self.association_distance is not None and self.association_distance.size:
            out["association_distance_max"] = float(self.association_distance.max())
            out["association_distance_mean"] = float(self.association_distance.mean())
        return out

    def summary_text(self) -> str:
        lines = [f"points: {self.count} (excluded {self.excluded})", f"RMS relative depth error: {self.rms_error:.4f}"]
        for t, f in self.fraction_under.items():
            lines.append(f"fraction under {100 * t:g}%: {f:.4f}")
        return "\n".join(lines) + "\n"


def depth_error(depth, gt, normalize: bool = True, thresholds=DEFAULT_THRESHOLDS,
                bin_width: float = 0.05, ids=None, association_distance=None) -> ErrorReport:
    """Per-point ``|depth - gt| / gt`` and the RMS ``sqrt(mean(e**2))``.

    With ``normalize`` each set is first divided by its own maximum, so only
    relative depth is compared. Pairs whose ground truth is not positive are
    excluded with a warning. ``fraction_under`` counts errors strictly below
    each threshold.
    """
    d = np.asarray(depth, dtype=float).ravel()
    g = np.asarray(gt, dtype=float).ravel()
    if d.size != g.size:
        raise ParameterError("depth and gt must have the same length")
    if d.size == 0:
        raise ParameterError("no depth pairs to evaluate")
    ids = np.arange(d.size) if ids is None else np.asarray(ids)
    if normalize:
        dmax, gmax = d.max(), g.max()
        if dmax <= 0 or gmax <= 0:
            raise ParameterError("cannot normalize depths whose maximum is not positive")
        d, g = d / dmax, g / gmax
    keep = g > 0
    excluded = int((~keep).sum())
    if excluded:
        log.warning("depth_error: excluded %d point(s) with non-positive ground-truth depth", excluded)
    d, g, ids = d[keep], g[keep], ids[keep]
    if association_distance is not None:
        association_distance = np.asarray(association_distance, dtype=float)[keep]
    e = np.abs(d - g) / g
    rms = math.sqrt(float((e * e).mean())) if e.size else float("nan")
    frac = {float(t): float((e < t).mean()) if e.size else 0.0 for t in sorted(thresholds)}
    return ErrorReport(ids, d, g, e, rms, frac, error_histogram(e, bin_width), excluded, association_distance)


def evaluate_tree(recon_xyz, gt_xyz, normalize: bool = True, thresholds=DEFAULT_THRESHOLDS,
                  bin_width: float = 0.05, ids=None) -> ErrorReport:
    """Associate reconstructed points to ground truth in (x, y), then score depth."""
    recon = np.asarray(recon_xyz, dtype=float)
    gt = np.asarray(gt_xyz, dtype=float)
    idx, dist = associate(recon, gt)
    return depth_error(recon[:, 2], gt[idx, 2], normalize, thresholds, bin_width, ids, dist)
