import json
from pathlib import Path

import numpy as np
import pytest

from padbench import runner
from padbench.cli import main
from padbench.ensemble import KERNELS
from padbench.manifest import CLASS_LABELS
from padbench.runner import (DETECTOR_METHODS, ConfigError, ExperimentConfig, ResultsBundle, audit_leakage,
                             emit_report, fusion_method, prepare_image, run_experiment)
from padbench.splits import SplitPlan
from padbench.toygen import ToyConfig, generate_toy_corpus

# small, fast detectors: these tests check plumbing, not accuracy
FAST = {
    "texture": {"sizes": [3], "bits": 6, "kinds": ["svm", "random_forest", "mlp"], "m": 1},
    "cnn": {"epochs": 2, "channels": [4, 8, 8], "input_size": 32},
    "vae": {"epochs": 2, "base_channels": 4, "latent_dim": 16},
    "head": {"epochs": 10, "hidden": 8},
}
METHODS = list(DETECTOR_METHODS) + [fusion_method(k) for k in KERNELS]


def make_config(out, manifest, protocol="closed_set", **extra):
    return ExperimentConfig(protocol=protocol, manifest=str(manifest), output_dir=str(out),
                            image_size=(32, 32), detectors=FAST, **extra)


@pytest.fixture(scope="module")
def corpus_paths(toy_corpus, external_live, tmp_path_factory):
    held = tmp_path_factory.mktemp("held")
    generate_toy_corpus(ToyConfig({"bona_fide": 6, "printout": 3, "synthetic": 3}, seed=13, source_dataset="held",
                                  id_prefix="held_"), held)
    return {"manifest": Path(toy_corpus.root) / "manifest.csv",
            "external": Path(external_live.root) / "manifest.csv",
            "heldout": held / "manifest.csv"}


@pytest.fixture(scope="module")
def closed_run(corpus_paths, tmp_path_factory):
    out = tmp_path_factory.mktemp("closed")
    return out, run_experiment(make_config(out, corpus_paths["manifest"]))


# ---------------------------------------------------------------------------
# configuration


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="protocol"):
        ExperimentConfig("kfold", "m.csv", str(tmp_path))
    with pytest.raises(ConfigError, match="external_bona_fide"):
        ExperimentConfig("leave_one_pai_out", "m.csv", str(tmp_path))
    with pytest.raises(ConfigError, match="non-PAI"):
        ExperimentConfig("leave_one_pai_out", "m.csv", str(tmp_path), external_bona_fide="e.csv",
                         left_out=["bona_fide"])
    with pytest.raises(ConfigError, match="heldout"):
        ExperimentConfig("livdet", "m.csv", str(tmp_path))
    with pytest.raises(ConfigError, match="kernels"):
        ExperimentConfig("closed_set", "m.csv", str(tmp_path), kernels=["laplace"])
    with pytest.raises(ConfigError, match="detector sections"):
        ExperimentConfig("closed_set", "m.csv", str(tmp_path), detectors={"lbp": {}})
    with pytest.raises(ConfigError, match="schema_version"):
        ExperimentConfig("closed_set", "m.csv", str(tmp_path), schema_version=99)


def test_config_file_resolves_relative_paths(tmp_path):
    (tmp_path / "cfg").mkdir()
    path = tmp_path / "cfg" / "exp.json"
    path.write_text(json.dumps({"protocol": "closed_set", "manifest": "../data/m.csv", "output_dir": "out",
                                "schema_version": 1}))
    cfg = ExperimentConfig.from_file(path)
    assert cfg.manifest == str((tmp_path / "data" / "m.csv").resolve())
    assert cfg.output_dir == str((tmp_path / "cfg" / "out").resolve())
    path.write_text(json.dumps({"protocol": "closed_set", "manifest": "m.csv", "output_dir": "o", "folds": 3}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(path)


def test_prepare_image():
    img = np.arange(64 * 48, dtype=np.uint8).reshape(48, 64)
    assert prepare_image(img, (32, 24)).shape == (24, 32)
    assert prepare_image(img, (64, 48)) is not None and np.array_equal(prepare_image(img, (64, 48)), img)
    with pytest.raises(ValueError):
        prepare_image(np.zeros((4, 4, 3), np.uint8), (4, 4))


# ---------------------------------------------------------------------------
# closed set


def test_closed_set_artifacts(closed_run):
    out, bundle = closed_run
    assert not bundle.failures
    assert len(list((out / "plans").glob("*.json"))) == 5
    assert len(bundle.folds) == 5
    for fold in bundle.folds:
        assert sorted(fold.reports) == sorted(METHODS)
        assert (out / fold.plan_file).exists()
        on_disk = json.loads((out / "reports" / f"{fold.name}.json").read_text())
        assert sorted(on_disk) == sorted(METHODS)
        models = out / "models" / fold.name
        for name in ("texture.joblib", "cnn_fixed.pt", "cnn_fdr.pt", "vaepad.pt", "provenance.json"):
            assert (models / name).exists()
        assert len(list(models.glob("fusion_*.joblib"))) == len(KERNELS)
        assert fold.reports["texture"].n_attack + fold.reports["texture"].n_bona == len(
            SplitPlan.load(out / fold.plan_file).test_ids)
    assert sorted(bundle.aggregate) == sorted(METHODS)
    assert all(a.n_folds == 5 for a in bundle.aggregate.values())


def test_test_scores_cover_each_sample_once(closed_run):
    out, _ = closed_run
    ids = []
    for f in sorted((out / "scores").glob("*_fold?_test.csv")):
        ids += [line.split(",")[0] for line in f.read_text().splitlines()[1:]]
    assert len(ids) == len(set(ids)) == 12 * len(CLASS_LABELS)


def test_rerun_is_byte_identical(closed_run, corpus_paths, tmp_path):
    out, bundle = closed_run
    run_experiment(make_config(tmp_path, corpus_paths["manifest"]))
    for sub in ("reports", "scores", "plans"):
        for f in sorted((out / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / sub / f.name).read_bytes(), f.name
    again = ResultsBundle.load(tmp_path)
    assert again.to_dict()["folds"] == bundle.to_dict()["folds"]
    assert again.provenance["config_digest"] != bundle.provenance["config_digest"]  # output_dir differs


def test_closed_set_table_and_json(closed_run, tmp_path):
    out, bundle = closed_run
    table = emit_report(bundle, "table")
    header = table.splitlines()[0]
    assert header.split("  ")[0] == "Method" and "CCR ± 1σ" in header and "ACER" not in header
    assert all(f"{m} " in table for m in METHODS)
    assert "% ± " in table.splitlines()[2]
    path = emit_report(bundle, "json", tmp_path)
    assert ResultsBundle.from_json(path.read_text()) == bundle
    with pytest.raises(ValueError):
        emit_report(bundle, "html")


def test_audit_clean_then_tampered(closed_run, tmp_path):
    import shutil
    out, _ = closed_run
    assert audit_leakage(out) == []
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    plan = SplitPlan.load(copy / "plans" / "closed_set_fold0.json")
    prov_file = copy / "models" / "closed_set_fold0" / "provenance.json"
    prov = json.loads(prov_file.read_text())
    prov["cnn_fixed"]["trained_on"].append(sorted(plan.test_ids)[0])
    prov["fusion_rbf"]["trained_on"].append(sorted(plan.train_ids)[0])
    prov_file.write_text(json.dumps(prov))
    problems = audit_leakage(copy)
    assert any("cnn_fixed: 1 test samples in trained_on" in p for p in problems)
    assert any("fusion_rbf: trained on detector-training samples" in p for p in problems)
    assert any("fusion_rbf: archive and provenance disagree" in p for p in problems)
    scores = copy / "scores" / "closed_set_fold1_val.csv"
    scores.write_text(scores.read_text().replace(",val\n", ",test\n", 1))
    assert any("validation score file" in p for p in audit_leakage(copy))
    assert audit_leakage(tmp_path / "empty")


# ---------------------------------------------------------------------------
# other protocols


def test_loo_table_shape(corpus_paths, tmp_path):
    cfg = make_config(tmp_path, corpus_paths["manifest"], "leave_one_pai_out",
                      external_bona_fide=str(corpus_paths["external"]), left_out=["synthetic", "printout"],
                      kernels=["linear"])
    bundle = run_experiment(cfg)
    assert [f.name for f in bundle.folds] == ["loo_synthetic", "loo_printout"]
    assert bundle.aggregate == {}
    lines = emit_report(bundle).splitlines()
    assert lines[0].split() == ["Left", "out", "synthetic", "printout"]
    assert lines[1].split() == ["Method"] + ["CCR", "APCER", "BPCER"] * 2
    assert len(lines) == 3 + len(DETECTOR_METHODS) + 1
    assert audit_leakage(tmp_path) == []


def test_livdet_table_has_acer(corpus_paths, tmp_path):
    cfg = make_config(tmp_path, corpus_paths["manifest"], "livdet", heldout_test=str(corpus_paths["heldout"]),
                      kernels=["poly3"])
    bundle = run_experiment(cfg)
    assert len(bundle.folds) == 1
    assert emit_report(bundle).splitlines()[0].split() == ["Method", "CCR", "APCER", "BPCER", "ACER"]
    rep = bundle.folds[0].reports["texture"]
    assert (rep.n_bona, rep.n_attack) == (6, 6)
    assert audit_leakage(tmp_path) == []


def test_failed_fold_is_recorded_and_others_kept(corpus_paths, tmp_path, monkeypatch):
    real = runner.run_fold

    def flaky(plan, *args):
        if plan.name == "closed_set_fold2":
            raise RuntimeError("disk full")
        return real(plan, *args)

    monkeypatch.setattr(runner, "run_fold", flaky)
    bundle = run_experiment(make_config(tmp_path, corpus_paths["manifest"], kernels=["linear"]))
    assert [f["fold"] for f in bundle.failures] == ["closed_set_fold2"]
    assert "disk full" in bundle.failures[0]["error"]
    assert len(bundle.folds) == 4 and bundle.aggregate["texture"].n_folds == 4


# ---------------------------------------------------------------------------
# command line


def test_cli_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["toygen", "--per-class", "6", "--size", "32x32", "--seed", "3", "--out", str(data)]) == 0
    manifest = data / "manifest.csv"
    assert main(["curate", "--manifest", str(manifest), "--resolution", "32x32", "--out",
                 str(tmp_path / "cur")]) == 0
    assert json.loads((tmp_path / "cur" / "dedup_report.json").read_text())["removed_count"] == 0
    assert main(["splits", "closed", "--manifest", str(manifest), "--out", str(tmp_path / "plans")]) == 0
    plan = tmp_path / "plans" / "closed_set_fold0.json"
    assert plan.exists()

    cfg = tmp_path / "cnn.json"
    cfg.write_text(json.dumps({"epochs": 1, "channels": [4, 4, 4], "input_size": 32}))
    model = tmp_path / "cnn.pt"
    assert main(["train", "cnn", "--split", str(plan), "--manifest", str(manifest), "--config", str(cfg),
                 "--image-size", "32x32", "--out", str(model)]) == 0
    scores = tmp_path / "scores.csv"
    assert main(["score", "--model", str(model), "--manifest", str(manifest), "--image-size", "32x32",
                 "--out", str(scores)]) == 0
    rows = scores.read_text().splitlines()
    assert rows[0] == "sample_id,score" and len(rows) == 1 + 6 * len(CLASS_LABELS)

    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"protocol": "closed_set", "manifest": "data/manifest.csv", "output_dir": "run",
                               "image_size": [32, 32], "kernels": ["linear"], "detectors": FAST}))
    assert main(["run", "--config", str(exp)]) == 0
    assert "CCR ± 1σ" in capsys.readouterr().out
    assert main(["audit", "--bundle", str(tmp_path / "run")]) == 0
    assert main(["report", "--bundle", str(tmp_path / "run"), "--format", "json", "--out",
                 str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.json").exists()


def test_cli_error_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"protocol": "leave_one_pai_out", "manifest": "m.csv", "output_dir": "o"}))
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["audit", "--bundle", str(tmp_path)]) == 1
    with pytest.raises(SystemExit):
        main(["splits", "kfold", "--manifest", "m.csv", "--out", "x"])
