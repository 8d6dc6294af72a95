import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from vesselstereo import cli, raster
from vesselstereo.config import (ConfigError, PipelineConfig, config_hash, load_config, validate_config)
from vesselstereo.tree import read_swc

ROOT = Path(__file__).resolve().parents[1]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def test_shipped_defaults_file_is_valid():
    cfg = load_config(ROOT / "configs" / "default.yaml")
    assert validate_config(cfg) == []
    assert config_hash(cfg) == config_hash(PipelineConfig())
    syn = load_config(ROOT / "configs" / "synthetic.yaml")
    assert syn.geometry.magnification_correction


@pytest.mark.parametrize("override,needle", [
    ("geometry.hx=0", "hx"),
    ("matching.gp.theta2=-1", "theta2"),
    ("matching.rr=3", "matching.rr"),
    ("segmentation.mrf.K=[1]", "segmentation.mrf.K"),
])
def test_invalid_config_is_rejected_by_name(override, needle):
    with pytest.raises(ConfigError) as exc:
        load_config(None, [override])
    assert any(needle in e for e in exc.value.errors)


def test_errors_are_aggregated():
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["geometry.hx=-1", "geometry.a=0", "reconstruction.step=0"])
    assert len(exc.value.errors) >= 3


def test_overrides_beat_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("matching:\n  r: 12\nseed: 4\n")
    cfg = load_config(f, ["matching.r=15"])
    assert cfg.matching.r == 15.0 and cfg.seed == 4
    assert config_hash(cfg) != config_hash(PipelineConfig())


def test_unknown_file_key_exit_code(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text("geometry:\n  hxx: 3\n")
    rc = cli.main(["synth", "--config", str(f), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_USAGE
    assert "geometry.hxx" in capsys.readouterr().err


# --------------------------------------------------------------------------
# exit codes
# --------------------------------------------------------------------------


def test_missing_input_is_usage_error(tmp_path, capsys):
    rc = cli.main(["segment", "--image", str(tmp_path / "nope.png"), "--out", str(tmp_path)])
    assert rc == cli.EXIT_USAGE and "not found" in capsys.readouterr().err


def test_bad_arguments_exit_one(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vesselstereo", "trace", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "--mask" in r.stderr


def test_stage_failure_exit_two(tmp_path, capsys):
    raster.write_mask(tmp_path / "empty.png", np.zeros((32, 32), dtype=bool))
    rc = cli.main(["trace", "--mask", str(tmp_path / "empty.png"), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert rc == cli.EXIT_STAGE and "stage trace" in err


def test_unknown_spec_is_usage_error(tmp_path):
    assert cli.main(["synth", "--spec", "tangle", "--out", str(tmp_path)]) == cli.EXIT_USAGE


# --------------------------------------------------------------------------
# synth and pipeline runs
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--spec", "fork", "--out", str(out)]) == 0
    return out


def test_synth_writes_case(synth_dir):
    d = synth_dir / "fork"
    for name in ("image_a.png", "image_b.png", "gt.swc", "gt_a.swc", "gt_b.swc", "gt_correspondences.txt"):
        assert (d / name).is_file()
    assert raster.read_image(d / "image_a.png").shape == (512, 512)
    gt = read_swc(d / "gt.swc")
    assert len(gt) == len(read_swc(d / "gt_a.swc")) and gt.dim == 3
    cfg = load_config(synth_dir / "pipeline_config.yaml")
    assert cfg.geometry.magnification_correction
    meta = json.loads((synth_dir / "metadata.json").read_text())
    assert "fork/gt.swc" in meta["outputs"]


@pytest.fixture(scope="module")
def pipeline_runs(synth_dir, tmp_path_factory):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"run{k}")
        rc = cli.main(["pipeline", "--synth-dir", str(synth_dir / "fork"),
                       "--config", str(synth_dir / "pipeline_config.yaml"), "--out", str(out)])
        assert rc == 0
        outs.append(out)
    return outs


PRIMARY = ["tree_a.swc", "tree_b.swc", "pruned_a.swc", "pruned_b.swc", "correspondences.txt", "tree3d.swc",
           "mesh.obj", "mask_a.png", "mask_b.png", "eval_points.csv", "eval_histogram.csv", "eval_summary.txt",
           "eval_report.json", "metadata.json"]


def test_pipeline_outputs_and_report(pipeline_runs):
    out = pipeline_runs[0]
    for name in PRIMARY:
        assert (out / name).is_file(), name
    rep = json.loads((out / "eval_report.json").read_text())
    assert rep["rms_error"] <= 0.05
    meta = json.loads((out / "metadata.json").read_text())
    h = meta["config_hash"]
    assert meta["command"] == "pipeline" and set(meta["inputs"]) == {"image_a", "image_b", "gt"}
    assert {"numpy", "scipy", "python", "vesselstereo"} <= set(meta["versions"])
    for name in ("tree3d.swc", "correspondences.txt", "mesh.obj"):
        assert f"config_hash: {h}" in (out / name).read_text()
    assert rep["config_hash"] == h


def test_pipeline_is_byte_identical(pipeline_runs):
    a, b = pipeline_runs
    for name in PRIMARY:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_stage_commands_chain(synth_dir, tmp_path, pipeline_runs):
    d = synth_dir / "fork"
    cfg = ["--config", str(synth_dir / "pipeline_config.yaml")]
    w = {k: tmp_path / k for k in ("sa", "sb", "ta", "tb", "m", "r", "e")}
    assert cli.main(["segment", "--image", str(d / "image_a.png"), "--out", str(w["sa"])] + cfg) == 0
    assert cli.main(["segment", "--image", str(d / "image_b.png"), "--out", str(w["sb"])] + cfg) == 0
    assert cli.main(["trace", "--mask", str(w["sa"] / "mask.png"), "--out", str(w["ta"])] + cfg) == 0
    assert cli.main(["trace", "--mask", str(w["sb"] / "mask.png"), "--out", str(w["tb"])] + cfg) == 0
    assert cli.main(["match", "--tree-a", str(w["ta"] / "tree.swc"), "--tree-b", str(w["tb"] / "tree.swc"),
                     "--mask-a", str(w["sa"] / "mask.png"), "--mask-b", str(w["sb"] / "mask.png"),
                     "--out", str(w["m"])] + cfg) == 0
    assert cli.main(["reconstruct", "--tree-a", str(w["m"] / "pruned_a.swc"),
                     "--pairs", str(w["m"] / "correspondences.txt"), "--out", str(w["r"])] + cfg) == 0
    assert cli.main(["eval", "--recon", str(w["r"] / "tree3d.swc"), "--gt", str(d / "gt.swc"),
                     "--out", str(w["e"])] + cfg) == 0
    # the staged run reproduces the one-shot pipeline
    full = pipeline_runs[0]
    assert (w["ta"] / "tree.swc").read_text() == (full / "tree_a.swc").read_text()
    assert (w["m"] / "correspondences.txt").read_text() == (full / "correspondences.txt").read_text()
    assert (w["r"] / "tree3d.swc").read_text() == (full / "tree3d.swc").read_text()
    assert (w["e"] / "eval_points.csv").read_text() == (full / "eval_points.csv").read_text()
