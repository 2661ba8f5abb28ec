import json
import os

import numpy as np
import pytest

from skihl import cli
from skihl.pipeline import (PipelineConfig, config_from_toml, evaluate, run,
                            run_baseline, run_full_grounding)
from skihl.raster import LabelMap, load_f32
from skihl.synth import ScenarioConfig, write_scenario

SCENE = ScenarioConfig(rows=32, cols=32, seed=11, n_bumps=5,
                       water_level=45.0, noise_sigma=2.0, n_sparse_labels=8)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("scene")
    return write_scenario(SCENE, outdir)


def base_config(scene, out, **overrides):
    kwargs = dict(raster=scene["raster"], labels=scene["labels"],
                  truth=scene["truth"], out=str(out), eta=2, max_level=2,
                  epochs=25, pretrain_epochs=40, hidden=8, seed=0,
                  refine_threshold=0.1, figures=False)
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


@pytest.fixture(scope="module")
def selective(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("selective")
    config = base_config(scene, out, figures=True)
    return config, run(config)


# -- configuration ----------------------------------------------------------


def test_config_from_toml(tmp_path, scene):
    path = tmp_path / "run.toml"
    path.write_text(
        f'raster = "{scene["raster"]}"\n'
        f'labels = "{scene["labels"]}"\n'
        f'out = "{tmp_path}/out"\n'
        'eta = 2\n'
        'max_level = 2\n'
        'lambda = 0.1\n'
        'refine_thresholds = [0.4, 0.3]\n')
    config = config_from_toml(path)
    assert config.lambda_weight == 0.1
    assert config.refine_thresholds == (0.4, 0.3)
    assert config.refinement_policy(2) == {"threshold": 0.4}
    assert config.refinement_policy(1) == {"threshold": 0.3}


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('raster = "a"\nlabels = "b"\nout = "c"\nlearning = 1\n')
    with pytest.raises(ValueError, match="unknown config key"):
        config_from_toml(path)


def test_config_refinement_modes_exclusive():
    with pytest.raises(ValueError, match="mutually exclusive"):
        PipelineConfig(raster="a", labels="b", out="c",
                       refine_threshold=0.3, refine_fraction=0.5)


def test_config_thresholds_length_checked():
    with pytest.raises(ValueError, match="refine_thresholds"):
        PipelineConfig(raster="a", labels="b", out="c", max_level=2,
                       refine_thresholds=(0.4,))


def test_config_outer_rounds_checked():
    with pytest.raises(ValueError, match="outer_rounds"):
        PipelineConfig(raster="a", labels="b", out="c", outer_rounds=0)


def test_config_default_threshold():
    config = PipelineConfig(raster="a", labels="b", out="c")
    assert config.refine_threshold == 0.325
    assert config.refinement_policy(1) == {"threshold": 0.325}


def test_config_fraction_policy():
    config = PipelineConfig(raster="a", labels="b", out="c",
                            refine_fraction=0.25)
    assert config.refinement_policy(2) == {"refine_fraction": 0.25}


def test_config_training_budgets():
    config = PipelineConfig(raster="a", labels="b", out="c", max_level=2,
                            epochs=25, pretrain_epochs=40, outer_rounds=2)
    assert config.effective_pretrain_epochs == 40
    # pretrain + one stage per level plus the extra round
    assert config.effective_baseline_epochs == 40 + 4 * 25
    explicit = PipelineConfig(raster="a", labels="b", out="c",
                              baseline_epochs=7)
    assert explicit.effective_baseline_epochs == 7


# -- selective run artifacts ---------------------------------------------------


def test_run_stage_order(selective):
    _, result = selective
    names = [s["stage"] for s in result.report["stages"]]
    assert names == ["pretrain", "level_2", "level_1", "level_0"]
    assert result.report["arm"] == "selective"


def test_run_refines_and_freezes(selective):
    _, result = selective
    by_name = {s["stage"]: s for s in result.report["stages"]}
    assert by_name["level_2"]["n_refined"] > 0
    assert by_name["level_1"]["n_frozen"] > 0
    assert by_name["level_0"]["n_refined"] == 0
    assert by_name["level_1"]["n_atoms"] > by_name["level_2"]["n_atoms"]
    assert result.report["warnings"] == []


def test_run_stage_record_keys(selective):
    _, result = selective
    record = result.report["stages"][1]
    for key in ("level", "round", "n_atoms", "n_ground_rules",
                "n_clamped_labels", "n_frozen", "n_free", "n_conflicted",
                "solver_iterations", "solver_objective", "hinge_objective",
                "n_refined", "inference_seconds", "training_seconds",
                "train_loss_final", "inferred_accuracy", "classifier_accuracy"):
        assert key in record, key
    assert 0.0 <= record["inferred_accuracy"] <= 1.0


def test_run_writes_stage_and_final_artifacts(selective):
    config, result = selective
    for stage in ("level_2", "level_1", "level_0"):
        for name in ("inferred.pgm", "inferred.f32", "uncertainty.pgm",
                     "uncertainty.f32", "classifier.pgm", "frontier.csv",
                     "solver_trace.csv", "loss_curve.csv"):
            assert os.path.exists(os.path.join(config.out, stage, name)), (stage, name)
    for name in ("classifier.pgm", "inferred.pgm", "uncertainty.f32",
                 "classifier_uncertainty.f32", "model.ckpt"):
        assert os.path.exists(os.path.join(config.out, "final", name)), name
    assert os.path.exists(os.path.join(config.out, "report.json"))
    assert os.path.exists(os.path.join(config.out, "metrics.json"))
    assert os.path.exists(os.path.join(config.out, "pretrain_loss.csv"))


def test_run_renders_figures(selective):
    config, _ = selective
    figdir = os.path.join(config.out, "figures")
    for name in ("levels.png", "timing.png", "loss_curves.png"):
        path = os.path.join(figdir, name)
        assert os.path.exists(path), name
        assert os.path.getsize(path) > 0


def test_run_report_json_round_trips(selective):
    config, result = selective
    with open(os.path.join(config.out, "report.json")) as fh:
        loaded = json.load(fh)
    assert loaded["arm"] == "selective"
    assert loaded["config"]["eta"] == 2
    assert loaded["config"]["refine_threshold"] == 0.1
    assert loaded["totals"]["n_ground_rules"] == \
        sum(s["n_ground_rules"] for s in loaded["stages"][1:])
    assert loaded["final"]["inferred_accuracy"] == \
        result.report["final"]["inferred_accuracy"]
    assert loaded["hierarchical_loss"] >= 0.0


def test_run_metrics_json(selective):
    config, _ = selective
    with open(os.path.join(config.out, "metrics.json")) as fh:
        metrics = json.load(fh)
    assert set(metrics["per_class"]) == {"flood", "dry"}
    assert metrics["avu"]["t_u"] == 0.325
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_run_result_object(selective):
    _, result = selective
    assert result.classifier_map.rows == 32
    assert result.inferred_map.values.shape == (32, 32)
    assert result.uncertainty.shape == (32, 32)
    assert np.all(result.uncertainty >= 0.0)
    assert np.all(result.uncertainty <= np.log(2) + 1e-12)


def test_uncertainty_sidecar_holds_raw_nats(selective):
    config, result = selective
    raw = load_f32(os.path.join(config.out, "final", "uncertainty.f32"), 32, 32)
    assert np.allclose(raw, result.uncertainty.astype(np.float32), atol=1e-7)


# -- other arms ------------------------------------------------------------------


def test_full_grounding_refines_everything(scene, tmp_path):
    config = base_config(scene, tmp_path / "full")
    result = run_full_grounding(config)
    assert result.report["arm"] == "full_grounding"
    by_name = {s["stage"]: s for s in result.report["stages"]}
    assert by_name["level_2"]["n_refined"] == 8 * 8  # every root cell
    assert by_name["level_0"]["n_atoms"] == 32 * 32  # all pixels open
    assert result.report["warnings"] == []


def test_no_refinement_warns_and_freezes(scene, tmp_path):
    config = base_config(scene, tmp_path / "stuck", max_level=1,
                         refine_threshold=0.6935)  # above max entropy ln 2
    result = run(config)
    assert any(w.startswith("no cells refined at level 1")
               for w in result.report["warnings"])
    by_name = {s["stage"]: s for s in result.report["stages"]}
    assert by_name["level_1"]["n_refined"] == 0
    assert by_name["level_0"]["n_frozen"] > 0


def test_runs_are_deterministic(scene, tmp_path):
    outs = []
    for name in ("a", "b"):
        config = base_config(scene, tmp_path / name, max_level=1, epochs=10,
                             pretrain_epochs=20, outer_rounds=2)
        result = run(config)
        outs.append(config.out)
    names = [s["stage"] for s in result.report["stages"]]
    assert names == ["pretrain", "level_1", "level_0", "level_0_round_2"]
    for rel in (os.path.join("final", "inferred.f32"),
                os.path.join("final", "uncertainty.f32"),
                os.path.join("final", "model.ckpt"),
                "metrics.json"):
        with open(os.path.join(outs[0], rel), "rb") as fa, \
             open(os.path.join(outs[1], rel), "rb") as fb:
            assert fa.read() == fb.read(), rel
    reports = []
    for out in outs:
        with open(os.path.join(out, "report.json")) as fh:
            report = json.load(fh)
        del report["config"]["out"]  # the only path the two runs differ on
        for block in report["stages"] + [report["totals"]]:
            for key in list(block):
                if key.endswith("_seconds"):
                    del block[key]
        reports.append(report)
    assert reports[0] == reports[1]


def test_baseline_artifacts(scene, tmp_path):
    config = base_config(scene, tmp_path / "baseline")
    report = run_baseline(config)
    assert report["arm"] == "baseline"
    assert report["epochs"] == config.effective_baseline_epochs
    assert 0.0 <= report["classifier_accuracy"] <= 1.0
    for name in ("classifier.pgm", "model.ckpt", "baseline_loss.csv",
                 "report.json", "metrics.json"):
        assert os.path.exists(os.path.join(config.out, name)), name


def test_truth_shape_mismatch_rejected(scene, tmp_path):
    from skihl.raster import save_label_map
    bad_truth = tmp_path / "small.pgm"
    save_label_map(LabelMap(rows=8, cols=8, values=np.zeros((8, 8))), bad_truth)
    config = base_config(scene, tmp_path / "out", truth=str(bad_truth))
    with pytest.raises(ValueError, match="does not match"):
        run(config)


# -- evaluate -----------------------------------------------------------------


def test_evaluate_perfect_prediction(rng):
    truth = LabelMap(rows=8, cols=8,
                     values=(rng.uniform(0, 1, (8, 8)) > 0.5).astype(float))
    u = np.zeros((8, 8))
    report = evaluate(truth, truth, u, t_u=0.325)
    assert report["accuracy"] == 1.0
    assert report["avu"]["t_u"] == 0.325
    assert report["avu"]["avu_a"] == 1.0
    assert "avu_i_undefined" in report["avu"]["flags"]


# -- command line ---------------------------------------------------------------


def test_cli_synth(tmp_path, capsys):
    config = tmp_path / "scene.toml"
    config.write_text(f'out = "{tmp_path}/scene"\nrows = 16\ncols = 16\n'
                      'seed = 3\nn_sparse_labels = 4\n')
    assert cli.main(["-v", "synth", "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert "raster:" in out
    for name in ("scene.raster", "truth.pgm", "labels.csv", "provenance.json"):
        assert (tmp_path / "scene" / name).exists(), name


def test_cli_synth_requires_out(tmp_path, capsys):
    config = tmp_path / "scene.toml"
    config.write_text("rows = 8\ncols = 8\n")
    assert cli.main(["synth", "--config", str(config)]) == 2
    assert "missing required key 'out'" in capsys.readouterr().err


def write_run_toml(path, scene, out, extra=""):
    path.write_text(
        f'raster = "{scene["raster"]}"\n'
        f'labels = "{scene["labels"]}"\n'
        f'truth = "{scene["truth"]}"\n'
        f'out = "{out}"\n'
        'eta = 2\nmax_level = 1\nepochs = 10\npretrain_epochs = 20\n'
        'hidden = 8\nrefine_threshold = 0.1\nfigures = false\n' + extra)


def test_cli_run_baseline_eval(scene, tmp_path, capsys):
    toml = tmp_path / "run.toml"
    write_run_toml(toml, scene, tmp_path / "out")
    assert cli.main(["run", "--config", str(toml)]) == 0
    out = capsys.readouterr().out
    assert "inferred_accuracy:" in out and "report:" in out

    toml_full = tmp_path / "full.toml"
    write_run_toml(toml_full, scene, tmp_path / "out_full")
    assert cli.main(["run", "--config", str(toml_full), "--full-grounding"]) == 0
    with open(tmp_path / "out_full" / "report.json") as fh:
        assert json.load(fh)["arm"] == "full_grounding"
    capsys.readouterr()

    toml_base = tmp_path / "base.toml"
    write_run_toml(toml_base, scene, tmp_path / "out_base")
    assert cli.main(["baseline", "--config", str(toml_base)]) == 0
    assert "classifier_accuracy:" in capsys.readouterr().out

    metrics_path = tmp_path / "eval.json"
    rc = cli.main(["eval",
                   "--pred", str(tmp_path / "out" / "final" / "inferred.pgm"),
                   "--truth", scene["truth"],
                   "--unc", str(tmp_path / "out" / "final" / "uncertainty.f32"),
                   "--labels", scene["labels"],
                   "--out", str(metrics_path)])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    with open(metrics_path) as fh:
        written = json.load(fh)
    assert printed == written
    assert "avu" in written and written["avu"]["t_u"] == 0.325

    # PGM-with-sidecar uncertainty loads identically to the raw f32
    rc = cli.main(["eval",
                   "--pred", str(tmp_path / "out" / "final" / "inferred.pgm"),
                   "--truth", scene["truth"],
                   "--unc", str(tmp_path / "out" / "final" / "uncertainty.pgm"),
                   "--labels", scene["labels"],
                   "--t-u", "0.2"])
    assert rc == 0
    again = json.loads(capsys.readouterr().out)
    assert again["avu"]["t_u"] == 0.2
    assert again["confusion"] == written["confusion"]
