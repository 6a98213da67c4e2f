import json

import pytest

from config import DESK_ENV_VAR, Config
from errors import EXIT_USAGE, ArtifactError, UsageError
from frameworks import FrameworkSpec
from logging_utils import RunLogger
from main import main
from pipeline import RunManifest, aggregate_trends, compare_manifests, row_label, run_pipeline, slug
from training import Trainer

from conftest import TINY_EXPERIMENT


PIPELINE_EXPERIMENT = {
    **TINY_EXPERIMENT,
    "sweep": [{"method": "target"}, {"method": "random", "sample_size": 2}],
    "ablation": True,
    "inconsistency_seeds": 1,
}


@pytest.fixture(autouse=True)
def no_desk(monkeypatch):
    monkeypatch.delenv(DESK_ENV_VAR, raising=False)


def experiment_for(tmp_path, out_name):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(PIPELINE_EXPERIMENT))
    config = Config(str(path))
    success, error = config.load()
    assert success, error
    config.apply_overrides(out_dir=str(tmp_path / out_name))
    return config


def test_row_labels():
    assert row_label(FrameworkSpec("duorec_sup")) == "duorec (sup)"
    assert row_label(FrameworkSpec("duorec_both")) == "duorec"
    assert row_label(FrameworkSpec("cl4srec", name="cl4srec-strong")) == "cl4srec-strong"
    assert slug("fisher (w.o. cl4srec)") == "fisher_w.o._cl4srec"


def test_compare_manifests_reports_differences():
    a = RunManifest("d", 0, 1, stages=[{"stage": "train:x", "outputs": {"checkpoint": "aa"}}])
    b = RunManifest("d", 0, 1, stages=[{"stage": "train:x", "outputs": {"checkpoint": "bb"}},
                                        {"stage": "eval:x", "outputs": {"report": "cc"}}])
    assert compare_manifests(a, a) == []
    assert compare_manifests(a, b) == ["eval:x/report", "train:x/checkpoint"]


def manifest_with(seed, **checks):
    return RunManifest("d", seed, 1, reports={"acceptance": {"pool": "random", **checks}}, status="ok")


def three_seeds():
    return [
        manifest_with(0, fisher_ge_uniform=True, dissimilar_gt_similar=True, backward_passes_match=True),
        manifest_with(1, fisher_ge_uniform=False, dissimilar_gt_similar=False, backward_passes_match=True),
        manifest_with(2, fisher_ge_uniform=True, dissimilar_gt_similar=False, backward_passes_match=True),
    ]


def test_trend_checks_need_two_of_three_seeds():
    checks = {c.name: c for c in aggregate_trends(three_seeds())}
    assert set(checks) == {"fisher_ge_uniform", "dissimilar_gt_similar", "backward_passes_match"}
    assert checks["fisher_ge_uniform"].ok
    assert (checks["fisher_ge_uniform"].passed, checks["fisher_ge_uniform"].required) == (2, 2)
    assert not checks["dissimilar_gt_similar"].ok
    assert checks["backward_passes_match"].ok


def test_budget_check_must_hold_on_every_seed():
    manifests = three_seeds()
    manifests[1].reports["acceptance"]["backward_passes_match"] = False
    checks = {c.name: c for c in aggregate_trends(manifests)}
    assert checks["backward_passes_match"].required == 3
    assert not checks["backward_passes_match"].ok


def test_trend_checks_skip_seeds_without_a_check():
    manifests = three_seeds()
    del manifests[0].reports["acceptance"]["dissimilar_gt_similar"]
    manifests[1].reports["acceptance"]["dissimilar_gt_similar"] = True
    check = {c.name: c for c in aggregate_trends(manifests)}["dissimilar_gt_similar"]
    assert (check.passed, check.total, check.ok) == (1, 2, False)


def test_trend_input_errors():
    with pytest.raises(UsageError):
        aggregate_trends([])
    with pytest.raises(UsageError):
        aggregate_trends([manifest_with(0), manifest_with(0)])
    with pytest.raises(ArtifactError):
        aggregate_trends([manifest_with(0), RunManifest("d", 1, 1, status="failed")])


def test_trend_command(tmp_path):
    paths = []
    for m in three_seeds():
        paths.append(str(m.save(tmp_path / f"seed{m.seed}" / "manifest.json")))
    assert main(["--out-dir", str(tmp_path), "trend", *paths]) == 1
    assert main(["--out-dir", str(tmp_path), "trend", paths[0], paths[2], "--quorum", "0.5", "--output", str(tmp_path / "trend.json")]) == 0
    written = json.loads((tmp_path / "trend.json").read_text())
    assert written["fisher_ge_uniform"] == {"passed": 2, "total": 2, "ok": True}
    assert main(["--out-dir", str(tmp_path), "trend", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_failed_stage_leaves_partial_manifest(tmp_path, monkeypatch):
    def broken_train(self, *args, **kwargs):
        raise RuntimeError("disk went away")

    monkeypatch.setattr(Trainer, "train", broken_train)
    config = experiment_for(tmp_path, "broken")
    logger = RunLogger(str(tmp_path / "run.log"))
    try:
        with pytest.raises(RuntimeError):
            run_pipeline(config.experiment(), logger, raw_config=config.config_data)
    finally:
        logger.close()
    manifest = RunManifest.load(tmp_path / "broken" / "manifest.json")
    assert manifest.status == "failed"
    assert [s["status"] for s in manifest.stages] == ["ok", "failed"]
    assert manifest.stages[-1]["stage"].startswith("train:")
    assert manifest.stages[-1]["error"] == "RuntimeError: disk went away"


@pytest.mark.slow
def test_pipeline_is_reproducible(tmp_path):
    logger = RunLogger(str(tmp_path / "run.log"))
    try:
        manifests = []
        for name in ("first", "second"):
            config = experiment_for(tmp_path, name)
            manifests.append(run_pipeline(config.experiment(), logger, raw_config=config.config_data))
    finally:
        logger.close()

    first, second = manifests
    assert first.status == "ok"
    assert compare_manifests(first, second) == []
    assert first.reports["acceptance"]["backward_passes_match"]
    assert "dissimilar_gt_similar" in first.reports["acceptance"]

    stages = [s["stage"] for s in first.stages]
    assert stages[0] == "ingest"
    assert "merge:main" in stages
    assert "merge:ablation" in stages
    assert "fisher:cl4srec@target_n1" in stages
    assert "viz-plane" in stages

    out = tmp_path / "first"
    for name in ("manifest.json", "plane.csv", "reports/tables.txt", "reports/inconsistency.json",
                 "reports/topk_mass.json", "checkpoints/merged_fisher_main.ckpt.json"):
        assert (out / name).exists(), name
    tables = (out / "reports" / "tables.txt").read_text(encoding="utf-8")
    assert "NDCG@10 by candidate pool" in tables
    assert "not reproduced at this scale" in tables


@pytest.mark.slow
def test_replay_reproduces_hashes(tmp_path):
    config_path = tmp_path / "experiment.json"
    config_path.write_text(json.dumps({**PIPELINE_EXPERIMENT, "sweep": [], "ablation": False,
                                       "inconsistency_seeds": 0}))
    assert main(["--config", str(config_path), "--out-dir", str(tmp_path / "a"), "pipeline"]) == 0
    manifest = tmp_path / "a" / "manifest.json"
    assert main(["--out-dir", str(tmp_path / "b"), "pipeline", "--replay", str(manifest)]) == 0
    replayed = RunManifest.load(tmp_path / "b" / "manifest.json")
    assert compare_manifests(RunManifest.load(manifest), replayed) == []
