import json

import numpy as np
import pytest

from spdnet_geo import classify as cl
from spdnet_geo import data as dat
from spdnet_geo import harness as hn
from spdnet_geo.errors import FormatError, ShapeError, TrainingError


def small_set(seed=31, rotation=0.2, noise=0.15):
    cfg = dat.SynthConfig(dim=4, n_subjects=3, n_classes=2, n_trials=8,
                          class_spread=0.8, rotation_scale=rotation,
                          noise_scale=noise, seed=seed)
    return dat.synth_generate(cfg)


class TestRunConfig:
    def test_defaults_match_reported_settings(self):
        opt = hn.OptimizerConfig()
        assert opt.lr == 1e-3
        assert opt.weight_decay == 1e-5
        assert opt.batch_size == 256
        assert opt.steps == 1000

    def test_json_round_trip(self, tmp_path):
        cfg = hn.RunConfig(classifier="tslr", align=["ra", "dcr"], seed=5)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg.to_dict()))
        back = hn.RunConfig.from_json(path)
        assert back == cfg

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"classifier": "mdm", "bogus": 1}))
        with pytest.raises(FormatError):
            hn.RunConfig.from_json(path)

    def test_unknown_classifier_rejected(self):
        with pytest.raises(ShapeError):
            hn.RunConfig(classifier="nope").validated()

    def test_duplicate_stage_rejected(self):
        with pytest.raises(ShapeError):
            hn.RunConfig(align=["ra", "ra"]).validated()

    def test_csp_with_alignment_rejected(self):
        with pytest.raises(ShapeError):
            hn.RunConfig(classifier="csp-lda", align=["ra"]).validated()

    def test_fingerprint_semantics(self):
        base = hn.RunConfig(classifier="mdm", align=["ra"], seed=1)
        same_jobs = hn.RunConfig(classifier="mdm", align=["ra"], seed=1, jobs=4)
        other_seed = hn.RunConfig(classifier="mdm", align=["ra"], seed=2)
        other_clf = hn.RunConfig(classifier="tslr", align=["ra"], seed=1)
        assert base.fingerprint() == same_jobs.fingerprint()
        assert base.fingerprint() != other_seed.fingerprint()
        assert base.fingerprint() != other_clf.fingerprint()

    def test_label(self):
        assert hn.RunConfig(classifier="tslr", align=["ra", "dcr"]).label() == "ra+dcr/tslr"
        assert hn.RunConfig(classifier="mdm", align=[]).label() == "mdm"


class TestRunLoso:
    def test_ra_mdm_on_separable_data(self):
        ds = small_set()
        cfg = hn.RunConfig(classifier="mdm", align=["ra"], seed=0)
        report = hn.run_loso(cfg, ds)
        assert len(report.subjects) == 3
        assert not report.failed_subjects
        assert report.mean >= 90.0
        accs = [report.accuracies[s] for s in report.subjects]
        assert report.mean == pytest.approx(np.mean(accs), abs=1e-9)
        assert report.std == pytest.approx(np.std(accs), abs=1e-9)

    def test_constant_predictor_balanced_accuracy(self, monkeypatch):
        ds = small_set()

        def constant_fit_predict(cfg, train, test, audit, fold_seed):
            audit.check("constant", train, uses_labels=True)
            return np.zeros(len(test), dtype=int)

        monkeypatch.setattr(hn, "_fit_predict_classifier", constant_fit_predict)
        cfg = hn.RunConfig(classifier="mdm", align=[], seed=0)
        report = hn.run_loso(cfg, ds)
        for s in report.subjects:
            assert report.accuracies[s] == pytest.approx(50.0)  # 2 balanced classes

    def test_determinism_same_seed(self):
        ds = small_set()
        cfg = hn.RunConfig(classifier="tslr", align=["ra"], seed=3,
                           optimizer=hn.OptimizerConfig(steps=40))
        r1 = hn.run_loso(cfg, ds)
        r2 = hn.run_loso(cfg, ds)
        assert json.dumps(r1.to_json_dict(), sort_keys=True) == json.dumps(
            r2.to_json_dict(), sort_keys=True)

    def test_jobs_do_not_change_results(self):
        ds = small_set()
        cfg1 = hn.RunConfig(classifier="mdm", align=["ra"], seed=3, jobs=1)
        cfg2 = hn.RunConfig(classifier="mdm", align=["ra"], seed=3, jobs=2)
        r1 = hn.run_loso(cfg1, ds)
        r2 = hn.run_loso(cfg2, ds)
        assert json.dumps(r1.to_json_dict(), sort_keys=True) == json.dumps(
            r2.to_json_dict(), sort_keys=True)

    def test_failed_fold_is_recorded_and_run_continues(self, monkeypatch):
        ds = small_set()
        original = cl.mdm_fit
        calls = {"n": 0}

        def flaky_fit(train, n_classes=None):
            calls["n"] += 1
            if calls["n"] == 2:
                raise TrainingError("synthetic failure")
            return original(train, n_classes)

        monkeypatch.setattr(cl, "mdm_fit", flaky_fit)
        cfg = hn.RunConfig(classifier="mdm", align=[], seed=0)
        report = hn.run_loso(cfg, ds)
        assert len(report.failed_subjects) == 1
        ok = [s for s in report.subjects if s not in report.failed_subjects]
        assert len(ok) == 2
        assert report.accuracies[report.failed_subjects[0]] is None

    def test_zero_shot_audit_trips_on_leakage(self):
        ds = small_set()
        audit = hn.ZeroShotAudit(held_out=1)
        audit.check("ra(test)", ds.subset(ds.subjects == 1), uses_labels=False)
        with pytest.raises(TrainingError, match="zero-shot"):
            audit.check("mdm", ds, uses_labels=True)

    def test_audit_trail_in_report(self):
        ds = small_set()
        cfg = hn.RunConfig(classifier="mdm", align=["ra"], seed=0)
        report = hn.run_loso(cfg, ds)
        for s in report.subjects:
            stages = [e["stage"] for e in report.audits[s]]
            assert "ra(train)" in stages and "mdm" in stages
            for event in report.audits[s]:
                if event["uses_labels"]:
                    assert s not in event["subjects"]


class TestEmitTable:
    def test_mdm_column_statistics(self):
        # per-subject values of the published MDM baseline column
        mdm = [61.81, 26.39, 72.92, 44.79, 42.71, 32.29, 59.38, 71.18, 60.42]
        report = hn.report_from_accuracies("MDM", mdm)
        text, csv_text = hn.emit_table([report])
        assert "52.43 ± 15.66" in text
        assert "mean,52.43" in csv_text
        assert "std,15.66" in csv_text

    def test_single_subject_zero_std(self):
        report = hn.report_from_accuracies("X", [70.0])
        text, _ = hn.emit_table([report])
        assert "70.00 ± 0.00" in text

    def test_csv_reparse_matches_printed_precision(self):
        accs = [61.81, 26.39, 72.92, 44.79, 42.71, 32.29, 59.38, 71.18, 60.42]
        report = hn.report_from_accuracies("MDM", accs)
        _, csv_text = hn.emit_table([report])
        lines = csv_text.strip().splitlines()
        parsed = [float(line.split(",")[1]) for line in lines[1:10]]
        assert parsed == [round(a, 2) for a in accs]

    def test_mismatched_subjects_rejected(self):
        r1 = hn.report_from_accuracies("A", [50.0, 60.0])
        r2 = hn.report_from_accuracies("B", [50.0, 60.0, 70.0])
        with pytest.raises(FormatError):
            hn.emit_table([r1, r2])

    def test_multi_method_columns(self):
        r1 = hn.report_from_accuracies("A", [50.0, 60.0])
        r2 = hn.report_from_accuracies("B", [55.0, 65.0])
        text, csv_text = hn.emit_table([r1, r2])
        assert "A" in text.splitlines()[0] and "B" in text.splitlines()[0]
        assert csv_text.splitlines()[0] == "subject,A,B"


class TestWriteReport:
    def test_report_files(self, tmp_path):
        ds = small_set()
        cfg = hn.RunConfig(classifier="mdm", align=["ra"], seed=0)
        report = hn.run_loso(cfg, ds)
        out = tmp_path / "report"
        hn.write_report(report, out)
        assert (out / "report.json").exists()
        assert (out / "timings.json").exists()
        assert (out / "table.txt").exists()
        assert (out / "table.csv").exists()
        for s in report.subjects:
            assert (out / f"confusion_{s}.csv").exists()
        loaded = json.loads((out / "report.json").read_text())
        assert loaded["mean"] == pytest.approx(report.mean)
        assert "wall_clock" not in loaded

    def test_report_json_bit_identical_across_runs(self, tmp_path):
        ds = small_set()
        cfg = hn.RunConfig(classifier="mdm", align=["ra"], seed=0)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        hn.write_report(hn.run_loso(cfg, ds), out1)
        hn.write_report(hn.run_loso(cfg, ds), out2)
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
