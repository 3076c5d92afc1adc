import json

import numpy as np
import pytest
import yaml

from rano_response.evaluation import MetricsReport
from rano_response.evaluation.stats import TestKind as Kind
from rano_response.report import build_report, format_p, pvalue_rows
from rano_response.runner import (
    ApproachAxis,
    AxisStat,
    ExperimentRecord,
    Pipeline,
    RecordStore,
    Study,
    StudyConfig,
    axis_statistics,
    derive_seed,
    load_config,
    option_reports,
    select_winner,
    write_config_snapshot,
)


def rep(ba, f1=0.5, folds=None):
    return MetricsReport(ba, 0.5, 0.5, f1, per_fold=folds or [])


def record(option="a", fold=0, ba=0.5, axis="Subtraction", status="complete"):
    m = rep(ba) if status == "complete" else None
    return ExperimentRecord(axis, option, fold, m, "h", None, 1.0, status, "" if m else "RuntimeError: boom")


# records

def test_record_store_round_trip_and_duplicates(tmp_path):
    store = RecordStore(tmp_path / "r.jsonl")
    store.append(record("a", 0))
    store.append(record("a", 1, 0.7))
    with pytest.raises(ValueError, match="already exists"):
        store.append(record("a", 1))
    again = RecordStore(tmp_path / "r.jsonl")
    assert len(again) == 2 and ("Subtraction", "a", 1) in again
    assert again.get(("Subtraction", "a", 1)).metrics.balanced_accuracy == 0.7


def test_record_store_drops_partial_last_line(tmp_path):
    path = tmp_path / "r.jsonl"
    store = RecordStore(path)
    store.append(record("a", 0))
    good = path.read_bytes()
    full = json.dumps(record("a", 1).to_dict())
    path.write_bytes(good + full[: len(full) // 2].encode())
    again = RecordStore(path)
    assert len(again) == 1
    assert path.read_bytes() == good
    again.append(record("a", 1))
    assert len(RecordStore(path)) == 2


def test_unterminated_complete_line_is_dropped(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps(record("a", 0).to_dict()))
    assert len(RecordStore(path)) == 0
    assert path.read_bytes() == b""


def test_duplicate_keys_in_file_are_rejected(tmp_path):
    path = tmp_path / "r.jsonl"
    line = json.dumps(record("a", 0).to_dict()) + "\n"
    path.write_text(line * 2)
    with pytest.raises(ValueError, match="duplicate"):
        RecordStore(path)


# winner selection and statistics

def test_winner_by_balanced_accuracy_then_f1_then_channels():
    assert select_winner({"x": rep(0.4), "y": rep(0.6)}, {}) == "y"
    assert select_winner({"x": rep(0.6, 0.3), "y": rep(0.6, 0.4)}, {}) == "y"
    assert select_winner({"x": rep(0.6), "y": rep(0.6)}, {"x": 4, "y": 1}) == "y"
    assert select_winner({"x": rep(0.6), "y": rep(0.6)}, {"x": 2, "y": 2}) == "x"
    assert select_winner({}, {}) is None


def test_option_reports_marks_incomplete():
    recs = [record("a", 0, 0.2), record("a", 1, 0.6), record("a", 2, 0.4),
            record("b", 0), record("b", 1, status="failed"),
            record("c", 0)]
    complete, notes = option_reports(recs, 3)
    assert list(complete) == ["a"]
    assert complete["a"].balanced_accuracy == pytest.approx(0.4)
    assert [f.balanced_accuracy for f in complete["a"].per_fold] == [0.2, 0.6, 0.4]
    assert "fold 1 failed (RuntimeError: boom)" in notes["b"]
    assert notes["c"] == "incomplete: 1/3 folds"


def test_two_options_use_mann_whitney():
    reports = {"false": rep(0.5, folds=[rep(v) for v in (0.1, 0.2, 0.3)]),
               "true": rep(0.5, folds=[rep(v) for v in (0.4, 0.5, 0.6)])}
    stats = axis_statistics("Subtraction", reports)
    assert len(stats) == 4 and all(s.result.test is Kind.MannWhitneyU for s in stats)
    ba = next(s for s in stats if s.metric == "balanced_accuracy")
    assert ba.result.p_value == pytest.approx(0.1)
    assert ba.result.groups == ("false", "true")


def test_many_options_use_kruskal_then_dunn():
    sep = {o: rep(0.5, folds=[rep(v + 0.5 * i) for v in (0.0, 0.01, 0.02, 0.03, 0.04)])
           for i, o in enumerate("xyz")}
    stats = axis_statistics("Architecture", sep)
    kinds = [s.result.test for s in stats]
    assert kinds.count(Kind.KruskalWallis) == 4
    assert kinds.count(Kind.DunnPosthoc) == 4 * 3
    flat = {o: rep(0.5, folds=[rep(0.5)] * 3) for o in "xyz"}
    assert {s.result.test for s in axis_statistics("Architecture", flat)} == {Kind.KruskalWallis}
    assert axis_statistics("Architecture", {"x": rep(0.5)}) == []


def test_axis_stat_round_trip():
    s = axis_statistics("Subtraction", {"a": rep(0.5, folds=[rep(0.1), rep(0.2)]),
                                        "b": rep(0.5, folds=[rep(0.3), rep(0.4)])})[0]
    assert AxisStat.from_dict(json.loads(json.dumps(s.to_dict()))) == s


# config

def test_config_round_trip_and_paths(tmp_path):
    raw = {"study": {"name": "s", "seed": 3, "output_dir": "out"},
           "data": {"root": "data"}, "train": {"max_epochs": 7, "patience": 3},
           "augmentation": {"enabled": False}, "axes": {"Subtraction": [True]}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(raw))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.output_dir == str(tmp_path / "out") and cfg.data.root == str(tmp_path / "data")
    assert cfg.train.max_epochs == 7 and cfg.augmentation is None
    assert cfg.axes["Subtraction"] == [True] and len(cfg.axes["Architecture"]) == 5
    snap = write_config_snapshot(cfg, tmp_path / "o", "train")
    loaded = yaml.safe_load(snap.read_text())
    assert loaded["command"] == "train" and loaded["config_hash"] == cfg.hash()
    loaded.pop("command"), loaded.pop("config_hash")
    assert StudyConfig.from_dict(loaded).hash() == cfg.hash()


@pytest.mark.parametrize("raw, match", [
    ({"train": {"epochs": 3}}, "TrainConfig"),
    ({"bogus": {}}, "unknown config sections"),
    ({"axes": {"Color": ["red"]}}, "unknown axes"),
    ({"axes": {"Subtraction": []}}, "no options"),
])
def test_config_errors(raw, match):
    with pytest.raises(ValueError, match=match):
        StudyConfig.from_dict(raw)


def test_derive_seed_is_stable():
    assert derive_seed(0, "Architecture", "AlexNet3D") == derive_seed(0, "Architecture", "AlexNet3D")
    assert derive_seed(0, "a") != derive_seed(1, "a")
    assert 0 <= derive_seed("x") < 2**31


def test_pipeline_from_choices():
    p = Pipeline.from_choices({"Subtraction": "true", "Modalities": "CT1+T1W+T2W+FLAIR",
                               "Architecture": "AlexNet3D", "Pretraining": "None", "ClinicalData": False})
    assert p.input_spec(7).channel_count == 4 and p.input_spec(7).clinical_dim == 0
    assert p.slug() == "sub_CT1-T1W-T2W-FLAIR_AlexNet3D_None_noclin"
    with pytest.raises(ValueError):
        Pipeline.from_choices({"Subtraction": "maybe", "Modalities": "CT1", "Architecture": "AlexNet3D",
                               "Pretraining": "None", "ClinicalData": False})


# greedy axis logic, with training replaced by a scripted score

def scripted_study(tmp_path, scores, fail=()):
    cfg = StudyConfig(output_dir=str(tmp_path), folds=StudyConfig().folds)
    cfg.folds.n_folds = 3
    study = Study(cfg, progress=None)
    calls = []

    def fake_train_one(choices, fold, seed_path, out_dir):
        calls.append((seed_path[1], seed_path[2], fold))
        if (seed_path[2], fold) in fail:
            raise RuntimeError("diverged")
        ba = scores[seed_path[2]] + 0.01 * fold
        return rep(ba), {"checkpoint": f"{seed_path[2]}-{fold}.pt", "best_epoch": 0, "n_train": 8, "n_test": 2}

    study.train_one = fake_train_one
    return study, calls


def test_run_axis_and_resume(tmp_path):
    study, calls = scripted_study(tmp_path, {"false": 0.3, "true": 0.6})
    axis = ApproachAxis("Subtraction", (False, True))
    store = RecordStore(tmp_path / "records.jsonl")
    frozen = study.cfg.initial_choices()
    winner, recs, stats = study.run_axis(axis, frozen, store)
    assert winner is True and len(recs) == 6 and len(calls) == 6 and len(stats) == 4
    calls.clear()
    again = study.run_axis(axis, frozen, RecordStore(tmp_path / "records.jsonl"))
    assert calls == [] and again[0] is True


def test_failed_fold_leaves_option_incomplete(tmp_path):
    study, calls = scripted_study(tmp_path, {"Densenet121": 0.9, "AlexNet3D": 0.2}, fail={("Densenet121", 1)})
    axis = ApproachAxis("Architecture", ("Densenet121", "AlexNet3D"))
    winner, recs, stats = study.run_axis(axis, study.cfg.initial_choices(), RecordStore(tmp_path / "r.jsonl"))
    assert winner == "AlexNet3D"
    assert ("Architecture", "Densenet121", 2) not in calls  # remaining folds skipped
    assert stats == []
    failed = [r for r in recs if r.status == "failed"]
    assert len(failed) == 1 and failed[0].error.startswith("RuntimeError: diverged")


def test_single_option_axis_skips_training(tmp_path):
    study, calls = scripted_study(tmp_path, {})
    winner, recs, stats = study.run_axis(ApproachAxis("ClinicalData", (True,)), study.cfg.initial_choices(),
                                         RecordStore(tmp_path / "r.jsonl"))
    assert winner is True and recs == [] and stats == [] and calls == []


# report

def test_report_on_empty_study(tmp_path):
    info = build_report(tmp_path)
    assert info["records"] == 0 and info["figures"] == []
    assert "not produced results" in (tmp_path / "report" / "summary.md").read_text()
    assert "no statistical tests" in (tmp_path / "report" / "pvalues.md").read_text()


def test_p_value_bolding_threshold():
    assert format_p(0.049) == "**0.0490**"
    assert format_p(0.05) == "0.0500"
    assert format_p(0.049, markdown=False) == "0.0490"
    assert format_p(3e-6) == "**3.0e-06**"
    assert format_p(None) == ""


def test_pvalue_rows_group_metrics():
    stats = axis_statistics("Subtraction", {"false": rep(0.5, folds=[rep(0.1), rep(0.2), rep(0.3)]),
                                            "true": rep(0.5, folds=[rep(0.4), rep(0.5), rep(0.6)])})
    (row,) = pvalue_rows(stats)
    assert row["groups"] == "false vs true" and row["balanced_accuracy"] == pytest.approx(0.1)
    assert np.isfinite(row["f1"])
