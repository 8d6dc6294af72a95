"""Stage functions that wire the modules together under one configuration."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import evaluate, match, reconstruct, segment, synth, tree
from .config import PipelineConfig
from .errors import StageError, VesselStereoError
from .match import Affine2D, CorrespondenceSet
from .tree import VesselTree

log = logging.getLogger(__name__)


@contextmanager
def stage(name: str):
    """Re-raise any failure inside the block as a :class:`StageError` named ``name``."""
    try:
        yield
    except StageError:
        raise
    except (VesselStereoError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def segment_image(img, cfg: PipelineConfig) -> np.ndarray:
    with stage("segment"):
        return segment.segment_pipeline(img, cfg.segmentation)


def trace_mask(mask, cfg: PipelineConfig) -> VesselTree:
    with stage("trace"):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise StageError("trace", ValueError("mask is empty"))
        skel = tree.thin(mask)
        return tree.estimate_radii(tree.trace(skel), mask, step=cfg.trace.radius_step)


def resolve_affine(cfg: PipelineConfig, img_a=None, img_b=None, mask_a=None, mask_b=None) -> Affine2D:
    """The A-to-B affine named by ``matching.affine``."""
    a = cfg.matching.affine
    with stage("match/affine"):
        if a.source == "explicit":
            return Affine2D.from_sequence(a.matrix)
        if a.source == "pairs":
            with open(a.pairs_file, encoding="utf-8") as fh:
                pairs = CorrespondenceSet.from_text(fh.read())
            aff, rms = match.estimate_affine(pairs.points_a, pairs.points_b)
            log.info("affine fitted to %d pairs, residual RMS %.3f px", len(pairs), rms)
            return aff
        if a.ncc_input == "mask":
            if mask_a is None or mask_b is None:
                raise ValueError("translation search on masks needs both segmentation masks")
            ia, ib = np.asarray(mask_a, dtype=float), np.asarray(mask_b, dtype=float)
        else:
            if img_a is None or img_b is None:
                raise ValueError("translation search on raw images needs both images")
            ia, ib = np.asarray(img_a, dtype=float), np.asarray(img_b, dtype=float)
        return match.estimate_translation(ia, ib, a.max_shift_x, a.max_shift_y)


@dataclass
class MatchResult:
    pairs: CorrespondenceSet
    pruned_a: VesselTree
    pruned_b: VesselTree
    affine: Affine2D


def match_trees(tree_a: VesselTree, tree_b: VesselTree, affine: Affine2D, cfg: PipelineConfig) -> MatchResult:
    m = cfg.matching
    with stage("match"):
        seed, pa, pb = match.match_bifurcations(tree_a, tree_b, affine, m.r)
        pairs = match.dense_match(pa, pb, seed, m.gp, m.gate, m.max_points, affine, m.anchor_terminals)
        pairs.meta.update({k: v for k, v in seed.meta.items() if k not in pairs.meta})
    return MatchResult(pairs, pa, pb, affine)


@dataclass
class Reconstruction:
    raw: VesselTree
    tree3d: VesselTree
    mesh: reconstruct.Mesh


def reconstruct_tree(tree_a: VesselTree, pairs: CorrespondenceSet, cfg: PipelineConfig) -> Reconstruction:
    r = cfg.reconstruction
    with stage("reconstruct"):
        raw = reconstruct.build_tree_3d(cfg.geometry, tree_a, pairs)
        out = reconstruct.smooth_depth(raw, r.step) if r.smooth else raw
        mesh = reconstruct.mesh_export(out, r.ring_segments)
    return Reconstruction(raw, out, mesh)


def evaluate_tree(recon: VesselTree, gt: VesselTree, cfg: PipelineConfig) -> evaluate.ErrorReport:
    e = cfg.evaluation
    with stage("eval"):
        return evaluate.evaluate_tree(recon.positions, gt.positions, e.normalize, e.thresholds, e.bin_width,
                                      ids=np.array(recon.ids))


def synth_case(name: str, cfg: PipelineConfig) -> synth.SynthCase:
    s = cfg.synth
    with stage("synth"):
        if name not in synth.SHIPPED_SPECS:
            raise ValueError(f"unknown tree spec {name!r}")
        return synth.make_case(synth.SHIPPED_SPECS[name], cfg.geometry, tuple(s.canvas), s.clutter, s.render,
                               noise_seed=cfg.seed)


@dataclass
class PipelineResult:
    mask_a: np.ndarray
    mask_b: np.ndarray
    tree_a: VesselTree
    tree_b: VesselTree
    matched: MatchResult
    recon: Reconstruction
    report: evaluate.ErrorReport | None = None


def run_pipeline(img_a, img_b, cfg: PipelineConfig, gt: VesselTree | None = None) -> PipelineResult:
    """Segment, trace, match and reconstruct one stereo pair; score it when ``gt`` is given."""
    mask_a = segment_image(img_a, cfg)
    mask_b = segment_image(img_b, cfg)
    tree_a = trace_mask(mask_a, cfg)
    tree_b = trace_mask(mask_b, cfg)
    affine = resolve_affine(cfg, img_a, img_b, mask_a, mask_b)
    log.info("affine translation (%.1f, %.1f) px", *affine.T)
    matched = match_trees(tree_a, tree_b, affine, cfg)
    recon = reconstruct_tree(matched.pruned_a, matched.pairs, cfg)
    report = evaluate_tree(recon.tree3d, gt, cfg) if gt is not None else None
    return PipelineResult(mask_a, mask_b, tree_a, tree_b, matched, recon, report)
