"""End-to-end command-line behaviour: exit codes, files, printed summaries."""

import json
import shutil

import pytest

from ctsev.augment import AugSet
from ctsev.cli import EXIT_FAILURE, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, RunConfig, main
from ctsev.ensemble import read_predictions_file

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def desk_config(tmp_path, **extra):
    """A seconds-scale run config; written as JSON, returned as a path."""
    doc = {
        "seed": 5,
        "n_splits": 2,
        "val_fraction": 0.25,
        "n_slices": 2,
        "pre_crop_hw": [14, 14],
        "crop_hw": [12, 12],
        "window": {"level": -600.0, "width": 1500.0},
        "aug": {
            "set_id": "default_strong_mixup",
            "brightness": 0.2,
            "contrast": 0.2,
            "gamma_range": [0.9, 1.1],
            "rotate_limit_deg": 10.0,
            "median_kernel": 3,
            "mixup_alpha": 0.8,
        },
        "encoder_a": {"channels": [2, 2, 2]},
        "encoder_b": {"channels": [2, 2]},
        "optimizer": {"lr": 0.05, "momentum": 0.9, "epochs": 2, "batch_size": 2},
        "tta": True,
    }
    doc.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus one trained bundle, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(["generate", "--out", str(root / "data"), "--cases", "10",
               "--severe", "0.2", "--positive", "0.5", "--seed", "17",
               "--dims", "16", "16", "16"])
    assert rc == EXIT_OK
    config = desk_config(root)
    rc = main(["train", "--data", str(root / "data"), "--out", str(root / "bundle"),
               "--config", str(config)])
    assert rc == EXIT_OK
    return root


def test_usage_errors_exit_2():
    assert main([]) == EXIT_USAGE
    assert main(["generate"]) == EXIT_USAGE            # missing --out
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["predict", "--bundle", "x"]) == EXIT_USAGE


def test_help_exits_0(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "generate" in capsys.readouterr().out


def test_generate_reports_what_it_wrote(tmp_path, capsys):
    rc = main(["generate", "--out", str(tmp_path / "d"), "--cases", "6",
               "--severe", "0.5", "--positive", "0.5", "--seed", "1",
               "--dims", "16", "16", "16"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "wrote 6 volumes" in out
    assert "(3 severe, 3 positive)" in out
    assert (tmp_path / "d" / "manifest.json").is_file()
    assert (tmp_path / "d" / "labels.csv").is_file()
    assert len(list((tmp_path / "d").glob("*.mha"))) == 6


def test_generate_is_deterministic(tmp_path):
    args = ["--cases", "4", "--severe", "0.25", "--positive", "0.5",
            "--seed", "9", "--dims", "16", "16", "16"]
    assert main(["generate", "--out", str(tmp_path / "a")] + args) == EXIT_OK
    assert main(["generate", "--out", str(tmp_path / "b")] + args) == EXIT_OK
    for name in ["case00000.mha", "labels.csv", "manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_invalid_fractions_exit_1(tmp_path, capsys):
    rc = main(["generate", "--out", str(tmp_path / "d"), "--cases", "4",
               "--severe", "0.8", "--positive", "0.5"])
    assert rc == EXIT_FAILURE
    assert "error:" in capsys.readouterr().err


def test_train_writes_bundle_and_figures(workspace, capsys):
    for split in ("split1", "split2"):
        for variant in ("variantA.ckpt", "variantB.ckpt"):
            assert (workspace / "bundle" / split / variant).is_file()
    assert (workspace / "bundle" / "logs" / "training_log.csv").is_file()
    png = workspace / "bundle" / "figures" / "loss_curves.png"
    assert png.read_bytes().startswith(PNG_MAGIC)


def test_train_prints_one_summary_line_per_split(tmp_path, workspace, capsys):
    config = desk_config(tmp_path)
    rc = main(["train", "--data", str(workspace / "data"),
               "--out", str(tmp_path / "b2"), "--config", str(config),
               "--epochs", "0"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("split ")]
    assert len(lines) == 2
    # zero-epoch override: the untrained model ties every subject at 0.5
    assert lines[0] == "split 1: AUC_severity=0.5000 AUC_covid=0.5000"


def test_train_missing_data_dir_exits_1(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "b")])
    assert rc == EXIT_FAILURE
    assert "error:" in capsys.readouterr().err


def test_predict_writes_the_csv(workspace, tmp_path, capsys):
    out = tmp_path / "predictions.csv"
    rc = main(["predict", "--bundle", str(workspace / "bundle"),
               "--data", str(workspace / "data"), "--out", str(out)])
    assert rc == EXIT_OK
    assert "wrote 10/10 predictions" in capsys.readouterr().out
    preds = read_predictions_file(out)
    assert len(preds) == 10
    assert all(0.0 <= p.prob_severe <= 1.0 and 0.0 <= p.prob_covid <= 1.0 for p in preds)


def test_predict_without_manifest_globs_volumes(workspace, tmp_path):
    data_copy = tmp_path / "flat"
    shutil.copytree(workspace / "data", data_copy)
    (data_copy / "manifest.json").unlink()
    rc = main(["predict", "--bundle", str(workspace / "bundle"),
               "--data", str(data_copy), "--out", str(tmp_path / "p.csv")])
    assert rc == EXIT_OK
    assert len(read_predictions_file(tmp_path / "p.csv")) == 10


def test_predict_partial_failure_exits_3(workspace, tmp_path, capsys):
    data_copy = tmp_path / "broken"
    shutil.copytree(workspace / "data", data_copy)
    (data_copy / "case00003.mha").write_bytes(b"not a volume")
    rc = main(["predict", "--bundle", str(workspace / "bundle"),
               "--data", str(data_copy), "--out", str(tmp_path / "p.csv")])
    assert rc == EXIT_PARTIAL
    assert "wrote 9/10 predictions" in capsys.readouterr().out
    assert len(read_predictions_file(tmp_path / "p.csv")) == 9


def test_predict_no_tta_changes_the_scores(workspace, tmp_path):
    base = ["predict", "--bundle", str(workspace / "bundle"),
            "--data", str(workspace / "data")]
    assert main(base + ["--out", str(tmp_path / "tta.csv")]) == EXIT_OK
    assert main(base + ["--out", str(tmp_path / "no_tta.csv"), "--no-tta"]) == EXIT_OK
    with_tta = read_predictions_file(tmp_path / "tta.csv")
    without = read_predictions_file(tmp_path / "no_tta.csv")
    assert with_tta != without


def test_predict_is_deterministic(workspace, tmp_path):
    base = ["predict", "--bundle", str(workspace / "bundle"),
            "--data", str(workspace / "data")]
    assert main(base + ["--out", str(tmp_path / "one.csv")]) == EXIT_OK
    assert main(base + ["--out", str(tmp_path / "two.csv")]) == EXIT_OK
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()


def test_evaluate_prints_the_auc_line(tmp_path, capsys):
    (tmp_path / "labels.csv").write_text(
        "PatientID,probCOVID,probSevere\na,1,1\nb,1,0\nc,0,0\nd,0,0\n"
    )
    (tmp_path / "preds.csv").write_text(
        "PatientID,probCOVID,probSevere\na,0.9,0.8\nb,0.8,0.2\nc,0.1,0.3\nd,0.2,0.1\n"
    )
    rc = main(["evaluate", "--predictions", str(tmp_path / "preds.csv"),
               "--labels", str(tmp_path / "labels.csv")])
    assert rc == EXIT_OK
    assert capsys.readouterr().out.strip() == "AUC_severity=1.0000 AUC_covid=1.0000"


def test_evaluate_report_dir_writes_metrics_and_figure(tmp_path, capsys):
    (tmp_path / "labels.csv").write_text(
        "PatientID,probCOVID,probSevere\na,1,1\nb,1,0\nc,0,0\nd,0,0\n"
    )
    (tmp_path / "preds.csv").write_text(
        "PatientID,probCOVID,probSevere\na,0.9,0.8\nb,0.8,0.2\nc,0.1,0.3\nd,0.2,0.1\n"
    )
    rc = main(["evaluate", "--predictions", str(tmp_path / "preds.csv"),
               "--labels", str(tmp_path / "labels.csv"),
               "--report-dir", str(tmp_path / "report")])
    assert rc == EXIT_OK
    metrics = (tmp_path / "report" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "auc_severity,auc_covid"
    sev, cov = (float(x) for x in metrics[1].split(","))
    assert (sev, cov) == (1.0, 1.0)
    assert (tmp_path / "report" / "roc_curves.png").read_bytes().startswith(PNG_MAGIC)


def test_evaluate_severity_scope_flag_changes_the_score(tmp_path, capsys):
    (tmp_path / "labels.csv").write_text(
        "PatientID,probCOVID,probSevere\na,1,1\nb,1,0\nc,0,0\nd,0,0\n"
    )
    # severity scores rank a negative subject above the severe one
    (tmp_path / "preds.csv").write_text(
        "PatientID,probCOVID,probSevere\na,0.9,0.8\nb,0.8,0.2\nc,0.1,0.9\nd,0.2,0.1\n"
    )
    base = ["evaluate", "--predictions", str(tmp_path / "preds.csv"),
            "--labels", str(tmp_path / "labels.csv")]
    assert main(base) == EXIT_OK
    among_positives = capsys.readouterr().out
    assert main(base + ["--severity-all-subjects"]) == EXIT_OK
    all_subjects = capsys.readouterr().out
    assert among_positives.split()[0] == "AUC_severity=1.0000"
    assert all_subjects.split()[0] != "AUC_severity=1.0000"


def test_evaluate_missing_file_exits_1(tmp_path, capsys):
    rc = main(["evaluate", "--predictions", str(tmp_path / "none.csv"),
               "--labels", str(tmp_path / "none.csv")])
    assert rc == EXIT_FAILURE
    assert "error:" in capsys.readouterr().err


def test_run_config_parses_nested_json(tmp_path):
    cfg = RunConfig.from_file(desk_config(tmp_path))
    assert cfg.seed == 5
    assert cfg.n_splits == 2
    assert cfg.crop_hw == (12, 12)
    assert cfg.gamma_range == (0.9, 1.1)
    assert cfg.aug_set is AugSet.DEFAULT_STRONG_MIXUP
    assert cfg.channels_a == (2, 2, 2)
    assert cfg.lr == 0.05 and cfg.epochs == 2
    # unspecified fields keep their defaults
    assert cfg.momentum == 0.9 and cfg.median_kernel == 3


def test_run_config_defaults_cover_the_full_scale_recipe():
    cfg = RunConfig()
    assert cfg.crop_hw == (224, 224)
    assert cfg.pre_crop_hw == (256, 256)
    assert cfg.n_slices == 32
    assert cfg.n_splits == 5
    assert cfg.channels_a == (8, 16, 32) and cfg.channels_b == (8, 24)
    assert cfg.window_level == -600.0 and cfg.window_width == 1500.0
    trainer = cfg.trainer_config()
    assert trainer.encoder_a.variant == "A" and trainer.encoder_b.variant == "B"


def test_ablation_sweeps_all_four_augmentation_sets(workspace, tmp_path, capsys):
    config = desk_config(tmp_path, optimizer={"lr": 0.05, "momentum": 0.9,
                                              "epochs": 1, "batch_size": 2})
    rc = main(["train", "--data", str(workspace / "data"),
               "--out", str(tmp_path / "ablation"), "--config", str(config),
               "--ablation"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    table = (tmp_path / "ablation" / "ablation.csv").read_text().splitlines()
    assert table[0] == "aug_set,auc_severity_a,auc_severity_b,auc_covid_a,auc_covid_b"
    names = [line.split(",")[0] for line in table[1:]]
    assert names == ["default", "default_strong", "default_strong_mixup",
                     "default_strong_mixup_tta"]
    for name in names:
        assert (tmp_path / "ablation" / f"aug_{name}" / "split1" / "variantA.ckpt").is_file()
        assert name in out
    assert (tmp_path / "ablation" / "ablation.png").read_bytes().startswith(PNG_MAGIC)
