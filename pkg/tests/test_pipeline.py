import json

import pytest

from support import TINY_SPHERE as TINY
from vtsplat import io
from vtsplat.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, run
from vtsplat.pipeline import (STAGE_VERSION, ConfigError, PipelineConfig, StageInputError, Workspace, load_config,
                              load_patches, scalar_keys, stage_select)



@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def staged(tmp_path_factory, tiny_config):
    """Run every stage through the CLI once and return the work directory."""
    wd = str(tmp_path_factory.mktemp("work"))
    for cmd in ("synth", "carve", "train", "select-touches", "touch-sim", "refine", "eval"):
        assert run([cmd, "--workdir", wd, "--config", tiny_config]) == EXIT_OK, cmd
    return wd


# configuration

def test_profiles():
    desk, paper = PipelineConfig.for_profile("desk"), PipelineConfig.for_profile("paper")
    assert (desk.oracle.width, desk.oracle.height, desk.train.total_iterations) == (128, 128, 3000)
    assert (paper.oracle.width, paper.oracle.height, paper.train.total_iterations) == (1280, 720, 15000)
    assert desk.hash() != paper.hash()
    assert PipelineConfig.from_dict(desk.to_dict()) == desk


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        PipelineConfig.from_dict({"train": {"total_iters": 10}})
    with pytest.raises(ConfigError, match="unknown profile"):
        PipelineConfig.from_dict({"profile": "laptop"})
    with pytest.raises(ConfigError, match="ranker"):
        PipelineConfig.from_dict({"touch": {"ranker": "oracle"}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"train": {"anchor_insert_iteration": 10}})


def test_overrides_coerce_strings(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"total_iterations": 500, "anchor_insert_iteration": 400,
                                                  "densify_start": 100}}))
    cfg = load_config(str(p), {"seed": "5", "train.hull_pruning": "false", "oracle.center": "0,0,0.3"})
    assert cfg.seed == 5 and cfg.train.total_iterations == 500 and cfg.train.hull_pruning is False
    assert cfg.oracle.center == (0.0, 0.0, 0.3)
    with pytest.raises(ConfigError):
        load_config(None, {"seed": "five"})
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))


def test_scalar_keys_cover_nested_fields():
    keys = dict(scalar_keys())
    assert {"seed", "train.total_iterations", "touch.n_touches", "hull.tau_d", "oracle.shape"} <= set(keys)
    assert keys["hull.tau_d"] == 0.01


# command line

def test_show_config(capsys):
    assert run(["show-config", "--profile", "paper", "--train.total_iterations", "20000"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["train"]["total_iterations"] == 20000 and out["oracle"]["width"] == 1280


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["show-config", "--config", str(bad)]) == EXIT_CONFIG
    assert run(["show-config", "--seed", "x"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_select_before_train_fails(tmp_path, capsys):
    assert run(["select-touches", "--workdir", str(tmp_path)]) == EXIT_INPUT
    assert "requires trained global scene" in capsys.readouterr().err
    with pytest.raises(StageInputError, match="requires trained global scene"):
        stage_select(Workspace(tmp_path, PipelineConfig()))


def test_missing_inputs_exit_code(tmp_path, capsys):
    assert run(["carve", "--workdir", str(tmp_path)]) == EXIT_INPUT
    assert run(["eval", "--workdir", str(tmp_path)]) == EXIT_INPUT
    assert run(["carve", "--workdir", str(tmp_path), "--dataset", str(tmp_path / "none.json")]) == EXIT_INPUT


# staged run

def test_stage_metadata(staged):
    for stage in ("synth", "carve", "train", "select-touches", "touch-sim", "refine", "eval"):
        meta = json.loads((Workspace(staged, PipelineConfig()).dir(stage) / "stage.json").read_text())
        assert meta["version"] == STAGE_VERSION and meta["stage"] == stage
    ws = Workspace(staged, PipelineConfig())
    assert (ws.dir("train") / "log.jsonl").is_file()
    plan = json.loads((ws.dir("select-touches") / "plan.json").read_text())
    assert 1 <= len(plan["touches"]) <= 3
    ranks = [(t["part_rank"], t["geo_rank"]) for t in plan["touches"]]
    assert ranks == sorted(ranks)


def test_version_mismatch_refused(staged, tmp_path, tiny_config, capsys):
    import shutil
    wd = tmp_path / "w"
    shutil.copytree(staged, wd)
    meta_path = wd / "train" / "stage.json"
    meta = json.loads(meta_path.read_text())
    meta["version"] = STAGE_VERSION + 1
    meta_path.write_text(json.dumps(meta))
    assert run(["select-touches", "--workdir", str(wd), "--config", tiny_config]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "version" in err and "re-run" in err


def test_eval_no_touch_reports_zero_touches(staged, tiny_config, capsys):
    rep = json.loads((Workspace(staged, PipelineConfig()).dir("eval") / "report.json").read_text())
    assert rep["n_touches"] >= 1
    # the train artifact stops at anchor insertion, so the baseline must be trained to the end first
    assert run(["eval", "--workdir", staged, "--config", tiny_config, "--no-touch"]) == EXIT_INPUT
    capsys.readouterr()
    assert run(["train", "--workdir", staged, "--config", tiny_config, "--no-touch"]) == EXIT_OK
    capsys.readouterr()
    assert run(["eval", "--workdir", staged, "--config", tiny_config, "--no-touch"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["n_touches"] == 0 and out["chamfer_mm"] is not None


def test_export_ply(staged, tmp_path, tiny_config):
    out = tmp_path / "scene.ply"
    assert run(["export-ply", "--workdir", staged, "--config", tiny_config, "--stage", "refine",
                "--out", str(out)]) == EXIT_OK
    scene = io.import_gaussians(out)
    assert len(scene) > 0 and scene.anchored.any()


def _absolute_manifest(ws, extra):
    """Copy the synthesized manifest with absolute file references plus extra keys."""
    src = ws.manifest_path()
    doc = json.loads(src.read_text())
    root = src.parent.resolve()
    for fr in doc["frames"]:
        for k in ("color", "depth", "depth_prior", "normal", "mask"):
            if fr.get(k):
                fr[k] = str(root / fr[k])
    for k in ("gt_cloud", "labeled_cloud"):
        if doc.get(k):
            doc[k] = str(root / doc[k])
    doc.update(extra)
    return doc


def test_manual_touch_mode(staged, tmp_path, tiny_config):
    """Captured frames listed in the manifest replace the simulator."""
    ws = Workspace(staged, PipelineConfig.from_dict(TINY))
    sim_dir = ws.dir("touch-sim").resolve()
    sim = json.loads((sim_dir / "tactile.json").read_text())
    tactile = [{"id": e["id"], "rgb": str(sim_dir / e["rgb"]), "pose": e["pose"]} for e in sim["frames"]]
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(_absolute_manifest(ws, {"tactile": tactile,
                                                        "calibration": str(sim_dir / "calibration.json")})))
    wd = tmp_path / "manual"
    args = ["--workdir", str(wd), "--config", tiny_config, "--dataset", str(mpath)]
    assert run(["touch-sim", *args, "--manual"]) == EXIT_OK
    manual = Workspace(wd, PipelineConfig.from_dict(TINY))
    doc = json.loads((manual.dir("touch-sim") / "tactile.json").read_text())
    assert [e["id"] for e in doc["frames"]] == [e["id"] for e in sim["frames"]]
    patches = load_patches(manual)
    assert sum(p.in_contact for p in patches) == len(patches)
    # without a calibration file the captured frames cannot be decoded
    mpath.write_text(json.dumps(_absolute_manifest(ws, {"tactile": tactile})))
    assert run(["touch-sim", *args, "--manual"]) == EXIT_INPUT
