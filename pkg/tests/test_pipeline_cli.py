import json
import os
import shutil

import numpy as np
import pytest

from palnet import pipeline
from palnet.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from palnet.pipeline import ConfigError, PipelineConfig, load_config


def _small_config(out):
    return {
        "output": str(out), "n_subjects": 8, "seed": 5,
        "synthetic": {"resolution": [70, 60]},
        "patch": {"source": "coarse", "k": 100},
        "train": {"folds": 2, "max_epochs": 3, "batch_size": 4},
        "arch": {"mlp_widths": [32, 32, 3]},
        "ablation_variants": ["baseline", "no_attention"],
    }


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(_small_config(root / "out")))
    assert main(["run", "--config", str(cfg_path)]) == EXIT_OK
    return cfg_path, root / "out"


# -- configuration ---------------------------------------------------------------

def test_default_config_roundtrip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    assert cfg.patch.k == 1000 and cfg.arch.pool_factors == (5, 5, 4)


@pytest.mark.parametrize("bad, field", [
    ({"train": {"alpha": "abc"}}, "train.alpha"),
    ({"patch": {"strategy": "ball"}}, "patch.strategy"),
    ({"patch": {"k": 150}}, "patch.k"),
    ({"colour": 1}, "colour"),
    ({"seed": "x"}, "seed"),
    ({"postprocess": "median"}, "postprocess"),
    ({"ablation_variants": ["nope"]}, "ablation_variants"),
])
def test_invalid_config_names_the_field(bad, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        PipelineConfig.from_dict(bad)


def test_overrides_and_resolved_seeds(tmp_path):
    cfg = load_config(None, pipeline.parse_overrides(["train.alpha=0.5", "arch.attention=false",
                                                      "seed=9"]))
    assert cfg.train.alpha == 0.5 and cfg.arch.attention is False
    r = cfg.resolved()
    assert r.train.seed == r.registration.seed == r.synthetic.seed == 9
    with pytest.raises(ConfigError):
        pipeline.parse_overrides(["novalue"])
    with pytest.raises(ConfigError):
        load_config(None, {"train.nothing": 1})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(str(bad))


def test_cli_exit_codes_for_invalid_input(tmp_path, capsys):
    assert main(["show-config", "--set", "train.alpha=abc"]) == EXIT_INVALID
    assert "train.alpha" in capsys.readouterr().err
    assert main(["evaluate", "--output", str(tmp_path / "empty")]) == EXIT_INVALID
    assert "run `predict` first" in capsys.readouterr().err
    assert main(["train", "--output", str(tmp_path / "empty")]) == EXIT_INVALID
    assert "`preprocess`" in capsys.readouterr().err
    assert main(["show-config", "--seed", "4"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["seed"] == 4


def test_cli_runtime_failure_exit_code(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _small_config(out)
    cfg["n_subjects"] = 2
    cfg["train"]["folds"] = 2
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["generate", "--config", str(path)]) == EXIT_OK
    # corrupt one mesh so alignment fails while reading it
    (out / "data" / "meshes" / "subject_0000.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    assert main(["preprocess", "--config", str(path)]) == EXIT_RUNTIME
    assert capsys.readouterr().err.startswith("palnet: failed:")


# -- end-to-end ------------------------------------------------------------------

def test_run_produces_reports_and_manifests(small_run):
    _, out = small_run
    for stage in ("data", "align", "preprocess", "train", "predict", "evaluate"):
        m = pipeline.read_manifest(out / stage)
        assert m["status"] == "complete" and m["seed"] == 5
        assert "numpy" in m["versions"] and m["outputs"]
    summary = json.loads((out / "evaluate" / "summary.json").read_text())
    assert set(summary["all"]) == {"network", "atlas", "improvement_pct"}
    assert summary["all"]["network"]["n_landmarks"] == 50
    rep = json.loads((out / "evaluate" / "all" / "network" / "aggregate" / "report.json").read_text())
    assert len(rep["names"]) == 50 and rep["meta"]["folds"] == 2
    assert len(os.listdir(out / "predict" / "network")) == 8
    for f in range(2):
        assert (out / "train" / f"fold_{f}" / "model.ckpt").stat().st_size > 0
        assert (out / "train" / f"fold_{f}" / "history.csv").exists()


def test_rerun_is_a_noop_unless_forced(small_run):
    cfg_path, out = small_run
    ckpt = out / "train" / "fold_0" / "model.ckpt"
    before = ckpt.stat().st_mtime_ns
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    assert ckpt.stat().st_mtime_ns == before
    data = (out / "train" / "fold_0" / "model.ckpt").read_bytes()
    assert main(["train", "--config", str(cfg_path), "--force"]) == EXIT_OK
    assert ckpt.stat().st_mtime_ns != before
    assert ckpt.read_bytes() == data  # same seed, same bytes


def test_second_run_is_byte_identical(small_run, tmp_path):
    cfg_path, out = small_run
    cfg = json.loads(cfg_path.read_text())
    cfg["output"] = str(tmp_path / "again")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path)]) == EXIT_OK
    for sub in ("predict/network", "predict/raw", "predict/atlas"):
        files = sorted(os.listdir(out / sub))
        assert files == sorted(os.listdir(tmp_path / "again" / sub))
        for f in files:
            assert (out / sub / f).read_bytes() == (tmp_path / "again" / sub / f).read_bytes()
    for f in range(2):
        rel = f"train/fold_{f}/model.ckpt"
        assert (out / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_exclusion_and_postprocess_options(small_run, tmp_path, capsys):
    cfg_path, out = small_run
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    cfg = json.loads(cfg_path.read_text())
    cfg["output"] = str(work)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["evaluate", "--config", str(path), "--exclude-landmarks", "ears", "--svg"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["excluded"]["network"]["n_landmarks"] == 42
    mat = json.loads((work / "evaluate" / "excluded" / "network" / "aggregate" / "report.json")
                     .read_text())["distance_matrix"]
    assert np.asarray(mat).shape == (42, 42)
    assert (work / "evaluate" / "all" / "network" / "aggregate" / "distance_matrix.svg").exists()
    assert main(["evaluate", "--config", str(path), "--exclude-landmarks", "Xx"]) == EXIT_INVALID

    assert main(["predict", "--config", str(path), "--postprocess", "centroid:5"]) == EXIT_OK
    assert pipeline.read_manifest(work / "predict")["config"]["postprocess"] == "centroid:5"


def test_ablate_tabulates_variants(small_run, tmp_path, capsys):
    cfg_path, out = small_run
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    cfg = json.loads(cfg_path.read_text())
    cfg["output"] = str(work)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["ablate", "--config", str(path)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("variant,val_loss")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["baseline", "no_attention"]
    rows = json.loads((work / "ablate" / "ablation.json").read_text())
    assert rows[1]["overrides"] == {"arch.attention": False}
    assert (work / "ablate" / "no_attention" / "train" / "manifest.json").exists()
    assert main(["ablate", "--config", str(path), "--variants", "bogus"]) == EXIT_INVALID
