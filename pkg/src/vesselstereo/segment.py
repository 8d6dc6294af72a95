"""Vessel segmentation: CLAHE, Potts MRF labelling, label vote and clean-up."""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .errors import ParameterError, StageError

log = logging.getLogger(__name__)

# Lower bound on per-label standard deviation, in gray levels; keeps the
# Gaussian likelihood finite for noise-free regions.
SIGMA_FLOOR = 1.0


@dataclass
class MrfParams:
    K: int = 4
    beta_potts: float = 1.5
    max_sweeps: int = 20
    init_seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if not 2 <= self.K <= 16:
            errs.append(f"mrf.K must be in [2, 16], got {self.K}")
        if self.beta_potts < 0:
            errs.append(f"mrf.beta_potts must be >= 0, got {self.beta_potts}")
        if self.max_sweeps < 1:
            errs.append(f"mrf.max_sweeps must be >= 1, got {self.max_sweeps}")
        return errs


@dataclass
class MrfResult:
    labels: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    energies: list[float]
    """Energy of the k-means initialization followed by the energy after each sweep."""


def kmeans_init(img, K: int, seed: int = 0):
    """1-D k-means (k-means++ seeding) on pixel intensities.

    Returns ``(labels, mu, sigma)`` with labels sorted by ascending mean.
    """
    v = np.asarray(img, dtype=float)
    vals, inverse, counts = np.unique(v.ravel(), return_inverse=True, return_counts=True)
    if vals.size < K:
        raise ParameterError(f"K={K} exceeds the {vals.size} distinct intensities in the image")
    rng = np.random.default_rng(seed)
    w = counts / counts.sum()
    centers = [vals[rng.choice(vals.size, p=w)]]
    for _ in range(1, K):
        d2 = np.min((vals[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        p = counts * d2
        centers.append(vals[rng.choice(vals.size, p=p / p.sum())])
    c = np.sort(np.array(centers))
    for _ in range(200):
        assign = np.argmin(np.abs(vals[:, None] - c[None, :]), axis=1)
        new = c.copy()
        for k in range(K):
            sel = assign == k
            if sel.any():
                new[k] = np.average(vals[sel], weights=counts[sel])
            else:
                new[k] = vals[np.argmax(np.min(np.abs(vals[:, None] - c[None, :]), axis=1))]
        new = np.sort(new)
        if np.allclose(new, c, rtol=0, atol=1e-9):
            c = new
            break
        c = new
    assign = np.argmin(np.abs(vals[:, None] - c[None, :]), axis=1)
    sigma = np.empty(K)
    for k in range(K):
        sel = assign == k
        if sel.any():
            var = np.average((vals[sel] - c[k]) ** 2, weights=counts[sel])
            sigma[k] = max(math.sqrt(var), SIGMA_FLOOR)
        else:
            sigma[k] = SIGMA_FLOOR
    labels = assign[inverse].reshape(v.shape).astype(np.intp)
    return labels, c, sigma


def unary_costs(img, mu, sigma) -> np.ndarray:
    """Negative Gaussian log-likelihood per pixel and label, shape (H, W, K)."""
    v = np.asarray(img, dtype=float)[..., None]
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return 0.5 * np.log(2 * np.pi * sigma**2) + (v - mu) ** 2 / (2 * sigma**2)


def potts_disagreements(labels) -> int:
    labels = np.asarray(labels)
    return int((labels[1:, :] != labels[:-1, :]).sum() + (labels[:, 1:] != labels[:, :-1]).sum())


def mrf_energy(img, labels, mu, sigma, beta: float) -> float:
    u = unary_costs(img, mu, sigma)
    data = np.take_along_axis(u, np.asarray(labels)[..., None], axis=-1).sum()
    return float(data + beta * potts_disagreements(labels))


def _neighbour_agreement(labels: np.ndarray, K: int):
    """Per pixel: number of 4-neighbours, and how many carry each label."""
    h, w = labels.shape
    padded = np.full((h + 2, w + 2), -1, dtype=labels.dtype)
    padded[1:-1, 1:-1] = labels
    ks = np.arange(K)
    same = np.zeros((h, w, K), dtype=np.int16)
    count = np.zeros((h, w), dtype=np.int16)
    for sl in ((slice(0, -2), slice(1, -1)), (slice(2, None), slice(1, -1)),
               (slice(1, -1), slice(0, -2)), (slice(1, -1), slice(2, None))):
        nb = padded[sl]
        count += nb >= 0
        same += nb[..., None] == ks
    return count, same


def icm(img, labels, mu, sigma, beta: float, max_sweeps: int):
    """Iterated conditional modes on the Gaussian/Potts energy.

    One sweep visits the even-parity pixels ``(x + y) % 2 == 0`` and then the
    odd-parity ones. Pixels of one parity share no 4-neighbour, so updating a
    parity class at once is the same as visiting it pixel by pixel in raster
    order. A pixel changes label only on a strict energy decrease.

    Returns ``(labels, energies)``; ``energies[0]`` is the starting energy.
    """
    labels = np.array(labels, dtype=np.intp)
    K = len(mu)
    u = unary_costs(img, mu, sigma)
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    parity = (yy + xx) % 2
    energies = [mrf_energy(img, labels, mu, sigma, beta)]
    for _ in range(max_sweeps):
        changed = 0
        for par in (0, 1):
            count, same = _neighbour_agreement(labels, K)
            local = u + beta * (count[..., None] - same)
            best = np.argmin(local, axis=-1)
            cur_e = np.take_along_axis(local, labels[..., None], axis=-1)[..., 0]
            best_e = np.take_along_axis(local, best[..., None], axis=-1)[..., 0]
            flip = (parity == par) & (best_e < cur_e)
            labels[flip] = best[flip]
            changed += int(flip.sum())
        energies.append(mrf_energy(img, labels, mu, sigma, beta))
        if changed == 0:
            break
    return labels, energies


def mrf_segment(img, params: MrfParams | None = None, return_result: bool = False):
    """Multi-label segmentation by a Gaussian-likelihood Potts MRF.

    Label statistics come from 1-D k-means and stay fixed; ICM then descends
    ``sum_p -log N(I_p; mu_l, sigma_l) + beta * sum_{p~q} [l_p != l_q]`` over
    4-neighbourhoods. Labels are ordered by increasing mean intensity.
    """
    params = params or MrfParams()
    errs = params.validate()
    if errs:
        raise ParameterError("; ".join(errs))
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ParameterError("mrf_segment needs a non-empty 2-D image")
    labels, mu, sigma = kmeans_init(img, params.K, params.init_seed)
    labels, energies = icm(img, labels, mu, sigma, params.beta_potts, params.max_sweeps)
    if return_result:
        return MrfResult(labels, mu, sigma, energies)
    return labels


def select_vessel_label(raw, labels, top_fraction: float = 0.01) -> int:
    """Modal label among the ``top_fraction`` brightest raw pixels.

    Equal intensities are ranked by raster order; vote ties go to the smaller label.
    """
    if not 0 < top_fraction <= 1:
        raise ParameterError(f"top_fraction must be in (0, 1], got {top_fraction}")
    raw = np.asarray(raw).ravel()
    labels = np.asarray(labels).ravel()
    n = max(1, math.ceil(top_fraction * raw.size))
    order = np.argsort(-raw.astype(np.int64), kind="stable")[:n]
    return int(np.argmax(np.bincount(labels[order])))


def entropy_filter(raw, mask, window: int = 9, bins: int = 64, threshold: float = 4.5) -> np.ndarray:
    """Drop mask pixels whose local raw-image entropy is at least ``threshold`` bits."""
    if threshold < 0:
        raise ParameterError(f"entropy threshold must be >= 0, got {threshold}")
    mask = np.asarray(mask, dtype=bool)
    ent = raster.local_entropy(raw, mask, window, bins)
    return mask & ~(ent >= threshold)


@dataclass
class SegmentConfig:
    tile_grid: tuple[int, int] = (8, 8)
    clip_limit: float = 0.01
    clahe_bins: int = 256
    mrf: MrfParams = field(default_factory=MrfParams)
    top_fraction: float = 0.01
    entropy_window: int = 9
    entropy_bins: int = 64
    entropy_threshold: float = 4.5
    connectivity: int = 8
    dilation_radius: float = 2.0

    def validate(self) -> list[str]:
        errs = list(self.mrf.validate())
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            errs.append(f"segmentation.tile_grid must be two integers >= 1, got {self.tile_grid}")
        if not 0 < self.clip_limit <= 1:
            errs.append(f"segmentation.clip_limit must be in (0, 1], got {self.clip_limit}")
        if self.clahe_bins < 2 or self.entropy_bins < 2:
            errs.append("segmentation bins must be >= 2")
        if not 0 < self.top_fraction <= 1:
            errs.append(f"segmentation.top_fraction must be in (0, 1], got {self.top_fraction}")
        if self.entropy_window < 3 or self.entropy_window % 2 == 0:
            errs.append(f"segmentation.entropy_window must be odd and >= 3, got {self.entropy_window}")
        if self.entropy_threshold < 0:
            errs.append("segmentation.entropy_threshold must be >= 0")
        if self.connectivity not in (4, 8):
            errs.append(f"segmentation.connectivity must be 4 or 8, got {self.connectivity}")
        if self.dilation_radius < 0:
            errs.append("segmentation.dilation_radius must be >= 0")
        return errs


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"segment/{name}", exc) from exc


def segment_pipeline(raw, config: SegmentConfig | None = None, debug: dict | None = None) -> np.ndarray:
    """Raw X-ray image to a single connected binary vessel mask.

    Stages: CLAHE, MRF labelling, vessel-label vote on the raw image, label
    mask, entropy filter, largest component, dilation, hole filling. If the
    enhanced image has fewer distinct levels than ``K`` the label count is
    reduced with a warning; an image without contrast yields an empty mask.
    Intermediate arrays are stored in ``debug`` when a dict is passed.
    """
    cfg = config or SegmentConfig()
    errs = cfg.validate()
    if errs:
        raise ParameterError("; ".join(errs))
    raw = np.asarray(raw)
    with _stage("clahe"):
        enhanced = raster.clahe(raw, cfg.tile_grid, cfg.clip_limit, cfg.clahe_bins)
    with _stage("mrf"):
        levels = np.unique(enhanced).size
        if levels < 2:
            log.warning("segment: image has no contrast; returning an empty mask")
            labels = None
            mask = np.zeros(raw.shape, dtype=bool)
        else:
            mrf = cfg.mrf
            if levels < mrf.K:
                log.warning("segment: only %d intensity levels, reducing K from %d", levels, mrf.K)
                mrf = MrfParams(levels, mrf.beta_potts, mrf.max_sweeps, mrf.init_seed)
            labels = mrf_segment(enhanced, mrf)
    if labels is not None:
        with _stage("select_label"):
            vessel = select_vessel_label(raw, labels, cfg.top_fraction)
            mask = labels == vessel
    with _stage("entropy_filter"):
        filtered = entropy_filter(raw, mask, cfg.entropy_window, cfg.entropy_bins, cfg.entropy_threshold)
    with _stage("largest_component"):
        largest = raster.largest_component(filtered, cfg.connectivity)
    with _stage("dilate"):
        dilated = raster.dilate(largest, cfg.dilation_radius)
    with _stage("fill_holes"):
        final = raster.fill_holes(dilated)
    if debug is not None:
        debug.update(enhanced=enhanced, labels=labels, label_mask=mask, filtered=filtered,
                     largest=largest, final=final)
    return final
