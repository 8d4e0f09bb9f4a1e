import json

import pytest

from sdfgrasp.cli import EXIT_CONFIG, EXIT_OK, EXIT_PLAN_FAILED, format_table, main
from sdfgrasp.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from sdfgrasp.scenes import OBJECT_TAG, tabletop_scene
from sdfgrasp.sdf import Box

TINY = {
    "corpus": {"families": ["sphere"], "shapes_per_family": 2, "views_per_shape": 3, "n_surface": 64,
               "n_free": 64},
    "sdf_train": {"epochs": 2, "batch_views": 2, "points_per_view": 64, "queries_per_view": 64},
    "recon_eval": {"train_views": 1, "heldout_views": 1, "resolution": 16, "iou_samples": 2000,
                   "surface_samples": 200},
    "planning_corpus": {"families": ["box"], "shapes_per_family": 2, "views_per_shape": 2, "epochs": 2},
    "grasps": {"families": ["sphere", "box"], "scenes_per_family": 3, "grasps_per_scene": 30},
    "classifier": {"epochs": 2, "points": 64},
    "planner": {"max_seeds": 1, "solver": {"max_outer": 1, "max_inner": 5}},
    "compare": {"families": ["box"], "scenes_per_family": 1, "cameras": ["high"]},
}


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.planner.beta == -2.0 and cfg.planner.margin == 0.005
    assert cfg.provenance()["config_hash"] == ExperimentConfig().digest()


@pytest.mark.parametrize("data,match", [
    ({"bogus": 1}, "unknown keys"),
    ({"planner": {"betta": 1.0}}, "unknown keys"),
    ({"seed": "zero"}, "number"),
    ({"seed": 1.5}, "integer"),
    ({"grasps": {"camera": "side"}}, "camera"),
    ({"grasps": {"test_fraction": 1.0}}, "test_fraction"),
    ({"planner": {"margin": -0.1}}, "margin"),
    ({"corpus": {"families": "sphere"}}, "list"),
    ({"planner": []}, "object"),
])
def test_config_errors(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_load_config_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "planner": {"alpha": 2}}))
    cfg = load_config(path, seed=9, out=tmp_path / "o")
    assert cfg.seed == 9 and cfg.planner.alpha == 2.0 and cfg.out == str(tmp_path / "o")
    assert cfg.planner.beta == -2.0


def test_load_config_missing_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["gen-corpus", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_cli_missing_stage_input(tmp_path, capsys):
    assert main(["eval-recon", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "train-sdf" in capsys.readouterr().err


def test_format_table():
    text = format_table([{"a": 1.0, "b": "x"}, {"a": 0.25, "b": "long"}], ["a", "b"])
    lines = text.splitlines()
    assert lines[0].split() == ["a", "b"]
    assert lines[1].split() == ["1.0000", "x"]
    assert len({line.index(line.split()[1]) for line in lines}) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Every stage once on a tiny configuration."""
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "out"
    codes = {}
    for cmd in (["gen-corpus"], ["train-sdf"], ["eval-recon"], ["train-sdf", "--target", "planning"],
                ["gen-grasps"], ["train-grasp"]):
        codes[" ".join(cmd)] = main([*cmd, "--config", str(cfg), "--out", str(out)])
    return cfg, out, codes


def test_pipeline_stages_succeed(pipeline):
    _, out, codes = pipeline
    assert set(codes.values()) == {EXIT_OK}
    for rel in ("corpus/summary.json", "sdf_model", "recon_report.json", "recon_report.txt", "planning_sdf",
                "grasps/grasps.jsonl", "grasp_models/report.json"):
        assert (out / rel).exists(), rel


def test_artifacts_carry_provenance(pipeline):
    _, out, _ = pipeline
    for rel in ("corpus/summary.json", "recon_report.json", "grasps/summary.json", "grasp_models/report.json"):
        prov = json.loads((out / rel).read_text())["provenance"]
        assert set(prov) == {"seed", "config_hash", "version"}


def test_grasp_report_has_both_modes(pipeline):
    _, out, _ = pipeline
    rep = json.loads((out / "grasp_models" / "report.json").read_text())
    assert {"scratch", "fixed"} <= set(rep)
    assert rep["fixed"]["encoder_unchanged"] is True


def test_rerun_is_byte_identical(pipeline):
    cfg, out, _ = pipeline
    before = (out / "grasps" / "grasps.jsonl").read_bytes(), (out / "recon_report.json").read_bytes()
    assert main(["gen-grasps", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert main(["eval-recon", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "grasps" / "grasps.jsonl").read_bytes() == before[0]
    assert (out / "recon_report.json").read_bytes() == before[1]


def test_plan_on_empty_scene_is_planning_failure(pipeline, tmp_path):
    cfg, out, _ = pipeline
    scene = tabletop_scene(Box((0.03, 0.03, 0.05))).subset(exclude=(OBJECT_TAG,))
    scene.save(tmp_path / "empty.json")
    code = main(["plan", "--scene-file", str(tmp_path / "empty.json"), "--config", str(cfg), "--out", str(out)])
    assert code == EXIT_PLAN_FAILED
    assert json.loads((out / "plan" / "plan.json").read_text())["success"] is False


def test_plan_and_compare_run(pipeline):
    cfg, out, _ = pipeline
    code = main(["plan", "--scene", "0", "--config", str(cfg), "--out", str(out)])
    assert code in (EXIT_OK, EXIT_PLAN_FAILED)
    assert (out / "plan" / "reconstruction.obj").exists() or code == EXIT_PLAN_FAILED
    assert main(["compare", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "compare.json").read_text())
    assert set(rep["summary"]) == {"recon", "partial"}
    assert all("penetration_rate" in v for v in rep["summary"].values())
    assert main(["plan", "--scene", "99", "--config", str(cfg), "--out", str(out)]) == EXIT_CONFIG
