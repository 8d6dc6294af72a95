"""Command-line entry point: one subcommand per stage plus ``pipeline``.

Exit status is 0 on success, 1 for usage, configuration or missing-input
errors, and 2 when a stage fails. Log verbosity comes from the
``VESSELSTEREO_LOG`` environment variable (default ``WARNING``).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, pipeline, raster, synth
from ._io import atomic_write_text
from .config import PipelineConfig, config_hash, config_to_dict, dump_config, load_config
from .errors import ConfigError, StageError, VesselStereoError
from .match import CorrespondenceSet, attach_nodes
from .tree import VesselTree, read_swc, swc_write

log = logging.getLogger("vesselstereo")

LOG_ENV = "VESSELSTEREO_LOG"
EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2


class UsageError(Exception):
    """Bad command line or missing input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


# --------------------------------------------------------------------------
# File helpers
# --------------------------------------------------------------------------


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def read_image(path) -> np.ndarray:
    return raster.read_image(_need(path))


def read_mask(path) -> np.ndarray:
    return raster.read_mask(_need(path))


def read_pairs(path) -> CorrespondenceSet:
    return CorrespondenceSet.from_text(_need(path).read_text(encoding="utf-8"))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory, config hash and metadata for one command."""

    def __init__(self, command: str, cfg: PipelineConfig, out_dir, collector: _WarningCollector):
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = Path(out_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.collector = collector

    @property
    def header(self) -> list[str]:
        return [f"vesselstereo {__version__}", f"config_hash: {self.hash}"]

    def input(self, name: str, path) -> Path:
        p = _need(path)
        self.inputs[name] = _sha256(p)
        return p

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_text(self, name: str, text: str) -> None:
        atomic_write_text(self.path(name), text)

    def write_swc(self, name: str, t: VesselTree) -> None:
        self.write_text(name, swc_write(t, self.header))

    def write_pairs(self, name: str, pairs: CorrespondenceSet) -> None:
        meta = [f"{k}: {pairs.meta[k]}" for k in sorted(pairs.meta)]
        self.write_text(name, pairs.to_text(self.header + meta))

    def finish(self) -> None:
        meta = {
            "command": self.command,
            "config_hash": self.hash,
            "config": config_to_dict(self.cfg),
            "versions": {
                "vesselstereo": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "warnings": list(self.collector.messages),
        }
        meta.update(self.extra)
        atomic_write_text(self.out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_segment(args, run: Run) -> None:
    img = read_image(run.input("image", args.image))
    raster.write_mask(run.path("mask.png"), pipeline.segment_image(img, run.cfg))


def cmd_trace(args, run: Run) -> None:
    mask = read_mask(run.input("mask", args.mask))
    t = pipeline.trace_mask(mask, run.cfg)
    run.write_swc("tree.swc", t)
    run.extra["kind_counts"] = t.kind_counts()


def _affine_inputs(args, run: Run, cfg: PipelineConfig):
    if cfg.matching.affine.source == "pairs":
        run.input("affine_pairs", cfg.matching.affine.pairs_file)
    if cfg.matching.affine.source != "ncc":
        return {}
    if cfg.matching.affine.ncc_input == "mask":
        if not (args.mask_a and args.mask_b):
            raise UsageError("translation search on masks needs --mask-a and --mask-b")
        return {"mask_a": read_mask(run.input("mask_a", args.mask_a)),
                "mask_b": read_mask(run.input("mask_b", args.mask_b))}
    if not (args.image_a and args.image_b):
        raise UsageError("translation search on raw images needs --image-a and --image-b")
    return {"img_a": read_image(run.input("image_a", args.image_a)),
            "img_b": read_image(run.input("image_b", args.image_b))}


def cmd_match(args, run: Run) -> None:
    ta = read_swc(run.input("tree_a", args.tree_a))
    tb = read_swc(run.input("tree_b", args.tree_b))
    affine = pipeline.resolve_affine(run.cfg, **_affine_inputs(args, run, run.cfg))
    res = pipeline.match_trees(ta, tb, affine, run.cfg)
    run.write_pairs("correspondences.txt", res.pairs)
    run.write_swc("pruned_a.swc", res.pruned_a)
    run.write_swc("pruned_b.swc", res.pruned_b)
    run.extra["affine"] = affine.to_list()


def cmd_reconstruct(args, run: Run) -> None:
    ta = read_swc(run.input("tree_a", args.tree_a))
    with pipeline.stage("reconstruct"):
        pairs = attach_nodes(read_pairs(run.input("pairs", args.pairs)), ta)
    rec = pipeline.reconstruct_tree(ta, pairs, run.cfg)
    run.write_swc("tree3d.swc", rec.tree3d)
    run.write_text("mesh.obj", rec.mesh.to_obj(run.header))


def _write_report(run: Run, report) -> None:
    run.write_text("eval_points.csv", report.per_point_csv())
    run.write_text("eval_histogram.csv", report.histogram.to_csv())
    run.write_text("eval_summary.txt", report.summary_text())
    summary = dict(report.summary(), config_hash=run.hash, config=config_to_dict(run.cfg))
    run.write_text("eval_report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_eval(args, run: Run) -> None:
    recon = read_swc(run.input("recon", args.recon))
    gt = read_swc(run.input("gt", args.gt))
    _write_report(run, pipeline.evaluate_tree(recon, gt, run.cfg))


def cmd_synth(args, run: Run) -> None:
    names = args.spec or list(run.cfg.synth.specs)
    for name in names:
        if name not in synth.SHIPPED_SPECS:
            raise UsageError(f"unknown spec {name!r}; known: {', '.join(synth.SHIPPED_SPECS)}")
    for name in names:
        case = pipeline.synth_case(name, run.cfg)
        pt = case.projected
        raster.write_image(run.path(f"{name}/image_a.png"), case.image_a)
        raster.write_image(run.path(f"{name}/image_b.png"), case.image_b)
        run.write_swc(f"{name}/gt.swc", pt.tree3d)
        run.write_swc(f"{name}/gt_a.swc", pt.tree_a)
        run.write_swc(f"{name}/gt_b.swc", pt.tree_b)
        run.write_pairs(f"{name}/gt_correspondences.txt", pt.gt)
    # reconstructing synthetic data in world coordinates needs the lateral demagnification
    cfg = dataclasses.replace(run.cfg, geometry=dataclasses.replace(run.cfg.geometry, magnification_correction=True))
    run.write_text("pipeline_config.yaml", dump_config(cfg))


def cmd_pipeline(args, run: Run) -> None:
    image_a, image_b, gt = args.image_a, args.image_b, args.gt
    if args.synth_dir:
        d = Path(args.synth_dir)
        image_a, image_b = image_a or d / "image_a.png", image_b or d / "image_b.png"
        gt = gt or (d / "gt.swc" if (d / "gt.swc").is_file() else None)
    if not (image_a and image_b):
        raise UsageError("pipeline needs --image-a and --image-b (or --synth-dir)")
    img_a = read_image(run.input("image_a", image_a))
    img_b = read_image(run.input("image_b", image_b))
    gt_tree = read_swc(run.input("gt", gt)) if gt else None
    if run.cfg.matching.affine.source == "pairs":
        run.input("affine_pairs", run.cfg.matching.affine.pairs_file)
    res = pipeline.run_pipeline(img_a, img_b, run.cfg, gt_tree)
    raster.write_mask(run.path("mask_a.png"), res.mask_a)
    raster.write_mask(run.path("mask_b.png"), res.mask_b)
    run.write_swc("tree_a.swc", res.tree_a)
    run.write_swc("tree_b.swc", res.tree_b)
    run.write_swc("pruned_a.swc", res.matched.pruned_a)
    run.write_swc("pruned_b.swc", res.matched.pruned_b)
    run.write_pairs("correspondences.txt", res.matched.pairs)
    run.write_swc("tree3d.swc", res.recon.tree3d)
    run.write_text("mesh.obj", res.recon.mesh.to_obj(run.header))
    run.extra["affine"] = res.matched.affine.to_list()
    if res.report is not None:
        _write_report(run, res.report)
        run.extra["rms_error"] = res.report.rms_error


COMMANDS = {
    "segment": cmd_segment,
    "trace": cmd_trace,
    "match": cmd_match,
    "reconstruct": cmd_reconstruct,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vesselstereo", description="3-D vessel trees from stereo X-ray pairs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. matching.r=15 (repeatable)")
    common.add_argument("--out", "-o", required=True, help="output directory")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("segment", parents=[common], help="X-ray image to binary vessel mask")
    s.add_argument("--image", required=True)

    s = sub.add_parser("trace", parents=[common], help="vessel mask to SWC tree")
    s.add_argument("--mask", required=True)

    s = sub.add_parser("match", parents=[common], help="two SWC trees to correspondences")
    s.add_argument("--tree-a", required=True)
    s.add_argument("--tree-b", required=True)
    for name in ("--mask-a", "--mask-b", "--image-a", "--image-b"):
        s.add_argument(name, help="used by the translation search")

    s = sub.add_parser("reconstruct", parents=[common], help="pruned A tree + correspondences to 3-D SWC and mesh")
    s.add_argument("--tree-a", required=True, help="pruned A tree written by 'match'")
    s.add_argument("--pairs", required=True, help="correspondence file written by 'match'")

    s = sub.add_parser("synth", parents=[common], help="render synthetic stereo pairs with ground truth")
    s.add_argument("--spec", action="append", help=f"tree spec ({', '.join(synth.SHIPPED_SPECS)}); repeatable")

    s = sub.add_parser("eval", parents=[common], help="score a 3-D SWC against ground truth")
    s.add_argument("--recon", required=True)
    s.add_argument("--gt", required=True)

    s = sub.add_parser("pipeline", parents=[common], help="all stages on one stereo pair")
    s.add_argument("--image-a")
    s.add_argument("--image-b")
    s.add_argument("--gt", help="ground-truth 3-D SWC; enables the evaluation report")
    s.add_argument("--synth-dir", help="directory written by 'synth' for one tree")
    return p


def _setup_logging() -> None:
    level_name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    root = logging.getLogger("vesselstereo")
    root.setLevel(min(level, logging.WARNING))
    if not any(getattr(h, "_vesselstereo", False) for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        h._vesselstereo = True
        root.addHandler(h)
    for h in root.handlers:
        if getattr(h, "_vesselstereo", False):
            h.setLevel(level)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    collector = _WarningCollector()
    root = logging.getLogger("vesselstereo")
    root.addHandler(collector)
    try:
        cfg = load_config(args.config, args.set)
        run = Run(args.command, cfg, args.out, collector)
        COMMANDS[args.command](args, run)
        run.finish()
    except ConfigError as exc:
        for e in exc.errors:
            print(f"vesselstereo: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"vesselstereo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"vesselstereo {args.command}: stage {exc.stage} failed: "
              f"{type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (VesselStereoError, OSError) as exc:
        print(f"vesselstereo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    finally:
        root.removeHandler(collector)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
