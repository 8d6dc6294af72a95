"""Pipeline configuration: one YAML document of typed sections.

Unknown keys and wrongly typed values are rejected while loading; numeric
constraints of every module are then checked together by
:func:`validate_config`, which returns all problems at once.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .match import GPHyperparams
from .reconstruct import StereoGeometry
from .segment import SegmentConfig
from .synth import SHIPPED_SPECS, RenderStyle

AFFINE_SOURCES = ("ncc", "explicit", "pairs")
NCC_INPUTS = ("mask", "raw")


@dataclass
class AffineConfig:
    source: str = "ncc"
    """``ncc``: translation search; ``explicit``: ``matrix``; ``pairs``: fit to ``pairs_file``."""
    matrix: list | None = None
    pairs_file: str | None = None
    ncc_input: str = "mask"
    max_shift_x: int = 64
    max_shift_y: int = 4


@dataclass
class MatchConfig:
    affine: AffineConfig = field(default_factory=AffineConfig)
    r: float = 20.0
    gp: GPHyperparams = field(default_factory=GPHyperparams)
    gate: float = 3.0
    max_points: int = 64
    anchor_terminals: bool = True


@dataclass
class TraceConfig:
    radius_step: float = 0.25


@dataclass
class ReconstructConfig:
    step: float = 10.0
    smooth: bool = True
    ring_segments: int = 12


@dataclass
class EvalConfig:
    normalize: bool = True
    thresholds: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5])
    bin_width: float = 0.05


@dataclass
class SynthConfig:
    specs: list = field(default_factory=lambda: list(SHIPPED_SPECS))
    canvas: list = field(default_factory=lambda: [512, 512])
    """``[height, width]`` in pixels."""
    clutter: str = "none"
    render: RenderStyle = field(default_factory=RenderStyle)


@dataclass
class PipelineConfig:
    seed: int = 0
    """Base seed for synthetic image noise (view B uses ``seed + 1``)."""
    geometry: StereoGeometry = field(default_factory=StereoGeometry)
    segmentation: SegmentConfig = field(default_factory=SegmentConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    matching: MatchConfig = field(default_factory=MatchConfig)
    reconstruction: ReconstructConfig = field(default_factory=ReconstructConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(default, value, path: str, errors: list):
    """Check ``value`` against the type of ``default``; return the converted value."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a mapping")
            return default
        return _merge(default, value, path, errors)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
            return default
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if not _is_number(value):
            errors.append(f"{path}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return default
        return value
    if isinstance(default, np.ndarray):
        try:
            arr = np.array(value, dtype=float)
        except (TypeError, ValueError):
            errors.append(f"{path}: expected numbers")
            return default
        if arr.size != default.size:
            errors.append(f"{path}: expected {default.size} numbers, got {arr.size}")
            return default
        return arr.reshape(default.shape)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list, got {value!r}")
            return default
        if isinstance(default, tuple) and len(value) != len(default):
            errors.append(f"{path}: expected {len(default)} values, got {len(value)}")
            return default
        if default and all(_is_number(d) for d in default) and not all(_is_number(v) for v in value):
            errors.append(f"{path}: expected numbers")
            return default
        return type(default)(value)
    # fields defaulting to None accept any plain value; module checks follow
    return value


def _merge(obj, data: dict, path: str, errors: list):
    out = copy.deepcopy(obj)
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in names:
            errors.append(f"{where}: unknown key")
            continue
        setattr(out, key, _coerce(getattr(obj, key), value, where, errors))
    return out


def config_from_dict(data: dict | None) -> PipelineConfig:
    errors: list[str] = []
    cfg = _merge(PipelineConfig(), data or {}, "", errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError([f"override {item!r}: expected key.path=value"])
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError([f"override {key}: unparsable value {raw!r} ({exc})"]) from None
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read a YAML config (optional) and apply ``key.path=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: invalid YAML ({exc})"]) from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        data = loaded or {}
    for item in overrides:
        _deep_update(data, _parse_override(item))
    cfg = config_from_dict(data)
    errs = validate_config(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


# --------------------------------------------------------------------------
# Validation, serialization, hashing
# --------------------------------------------------------------------------


def validate_config(cfg: PipelineConfig) -> list[str]:
    """Every module constraint, checked up front. Empty list means valid."""
    errs = list(cfg.geometry.validate())
    errs += cfg.segmentation.validate()
    errs += cfg.matching.gp.validate()
    m = cfg.matching
    if m.r <= 0:
        errs.append(f"matching.r must be > 0, got {m.r}")
    if m.gate <= 0:
        errs.append(f"matching.gate must be > 0, got {m.gate}")
    if m.max_points < 2:
        errs.append(f"matching.max_points must be >= 2, got {m.max_points}")
    a = m.affine
    if a.source not in AFFINE_SOURCES:
        errs.append(f"matching.affine.source must be one of {AFFINE_SOURCES}, got {a.source!r}")
    if a.source == "explicit":
        if a.matrix is None or np.asarray(a.matrix, dtype=object).size != 9:
            errs.append("matching.affine.matrix must hold 9 numbers when source is 'explicit'")
    if a.source == "pairs" and not a.pairs_file:
        errs.append("matching.affine.pairs_file is required when source is 'pairs'")
    if a.ncc_input not in NCC_INPUTS:
        errs.append(f"matching.affine.ncc_input must be one of {NCC_INPUTS}, got {a.ncc_input!r}")
    if a.max_shift_x < 0 or a.max_shift_y < 0:
        errs.append("matching.affine shift ranges must be >= 0")
    if cfg.trace.radius_step <= 0:
        errs.append("trace.radius_step must be > 0")
    r = cfg.reconstruction
    if r.step <= 0:
        errs.append(f"reconstruction.step must be > 0, got {r.step}")
    if r.ring_segments < 3:
        errs.append(f"reconstruction.ring_segments must be >= 3, got {r.ring_segments}")
    e = cfg.evaluation
    if e.bin_width <= 0:
        errs.append("evaluation.bin_width must be > 0")
    if any(t <= 0 for t in e.thresholds):
        errs.append("evaluation.thresholds must be > 0")
    s = cfg.synth
    for name in s.specs:
        if name not in SHIPPED_SPECS:
            errs.append(f"synth.specs: unknown spec {name!r} (known: {', '.join(SHIPPED_SPECS)})")
    if len(s.canvas) != 2 or min(s.canvas) < 16:
        errs.append("synth.canvas must be [height, width] with both >= 16")
    if s.clutter not in ("none", "bone_disk"):
        errs.append(f"synth.clutter must be 'none' or 'bone_disk', got {s.clutter!r}")
    errs += s.render.validate()
    return errs


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.ravel().tolist()
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_hash(cfg: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON form of the full configuration."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
