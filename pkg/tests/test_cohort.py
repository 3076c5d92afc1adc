import csv
import json
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rano_response.cohort import (
    CLASS_ORDER,
    MODALITY_ORDER,
    STUDY_MODALITY_SETS,
    DuplicateTimepointError,
    EmptyCohortError,
    MetadataSchemaError,
    Modality,
    RanoLabel,
    StudySample,
    TimepointRecord,
    build_cohort,
    canonical_modalities,
    cohort_summary,
    filter_timepoints,
    index_dataset,
    modality_key,
    pair_consecutive,
    parse_modality_key,
    read_manifest,
    write_manifest,
)
from rano_response.synthetic import make_synthetic_cohort

ALL = MODALITY_ORDER


def rec(pid, week, label, mods=ALL):
    mods = canonical_modalities(mods)
    return TimepointRecord(pid, week, RanoLabel(label), mods, {m: f"/x/{pid}/{week}/{m.value}" for m in mods})


# brute-force oracles working from generator ground truth

def oracle_filter(sessions, surgery, gap=13):
    kept = []
    for s in sessions:
        sw = surgery.get(s.patient_id)
        if sw is None:
            continue
        if s.label not in (RanoLabel.PD, RanoLabel.SD, RanoLabel.PR, RanoLabel.CR):
            continue
        if s.week - sw < gap:
            continue
        if len(s.modalities) == 0:
            continue
        kept.append((s.patient_id, s.week))
    return kept


def oracle_pairs(sessions, surgery, mods, gap=13):
    kept = set(oracle_filter(sessions, surgery, gap))
    by_key = {(s.patient_id, s.week): s for s in sessions}
    out = set()
    for pid in {p for p, _ in kept}:
        weeks = sorted(w for p, w in kept if p == pid)
        for i in range(len(weeks) - 1):
            a, b = by_key[(pid, weeks[i])], by_key[(pid, weeks[i + 1])]
            if all(m in a.modalities for m in mods) and all(m in b.modalities for m in mods):
                out.add((pid, weeks[i], weeks[i + 1], b.label))
    return out


def test_class_order_fixed():
    assert [c.index for c in CLASS_ORDER] == [0, 1, 2, 3]
    assert [c.value for c in CLASS_ORDER] == ["PD", "SD", "PR", "CR"]
    with pytest.raises(ValueError):
        RanoLabel.PostOp.index


def test_label_parsing_aliases():
    assert RanoLabel.parse("Progressive Disease") is RanoLabel.PD
    assert RanoLabel.parse(" cr ") is RanoLabel.CR
    assert RanoLabel.parse("") is RanoLabel.Unlabeled
    assert RanoLabel.parse("Pre-Op") is RanoLabel.PreOp
    with pytest.raises(ValueError):
        RanoLabel.parse("maybe")


@given(st.lists(st.sampled_from(["CT1", "T1W", "T2W", "FLAIR", "t1c", "flair", "t2"]), min_size=1))
def test_canonical_modalities_order_independent(mods):
    a = canonical_modalities(mods)
    b = canonical_modalities(list(reversed(mods)))
    assert a == b
    assert list(a) == sorted(a, key=lambda m: m.rank)
    assert parse_modality_key(modality_key(a)) == a


def test_record_paths_must_match_available():
    with pytest.raises(ValueError):
        TimepointRecord("p", 20, RanoLabel.PD, (Modality.CT1,), {})


def test_index_empty_directory(tmp_path):
    idx = index_dataset(tmp_path, None)
    assert idx.records == []


def test_index_three_patient_fixture(tmp_path):
    layout = {
        ("A", -1): ["CT1", "T1W", "T2W", "FLAIR"],
        ("A", 20): ["CT1", "FLAIR"],
        ("A", 33): ["T2W"],
        ("B", 0): [],
        ("B", 15): ["t1c", "t1"],
        ("C", 14): ["FLAIR"],
        ("C", 28): ["CT1", "T1W", "T2W", "FLAIR"],
    }
    for (pid, wk), mods in layout.items():
        d = tmp_path / pid / f"week-{wk}"
        d.mkdir(parents=True)
        for m in mods:
            (d / f"{m}.nii.gz").touch()
        (d / "notes.txt").touch()
    idx = index_dataset(tmp_path, None)
    assert len(idx.records) == 7
    got = {(r.patient_id, r.week): set(r.available) for r in idx.records}
    want = {k: set(canonical_modalities(v)) for k, v in layout.items()}
    assert got == want
    assert all(r.label is RanoLabel.Unlabeled for r in idx.records)


def _write_meta(path, rows, header=("patient", "week", "rating", "surgery_week")):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_index_reports_bad_rows_without_abort(tmp_path):
    for wk in (20, 30):
        d = tmp_path / "data" / "P1" / f"week-{wk}"
        d.mkdir(parents=True)
        (d / "CT1.nii.gz").touch()
    meta = tmp_path / "meta.csv"
    _write_meta(meta, [["P1", "20", "PD", "0"], ["P1", "thirty", "SD", "0"], ["P9", "5", "PD", "0"]])
    idx = index_dataset(tmp_path / "data", meta)
    assert len(idx.records) == 2
    assert len(idx.errors) == 2
    assert {r.week: r.label for r in idx.records} == {20: RanoLabel.PD, 30: RanoLabel.Unlabeled}


def test_index_duplicate_metadata_is_fatal(tmp_path):
    d = tmp_path / "data" / "P1" / "week-20"
    d.mkdir(parents=True)
    meta = tmp_path / "meta.csv"
    _write_meta(meta, [["P1", "20", "PD", "0"], ["P1", "20", "SD", "0"]])
    with pytest.raises(DuplicateTimepointError):
        index_dataset(tmp_path / "data", meta)


def test_index_duplicate_session_dirs_are_fatal(tmp_path):
    (tmp_path / "P1" / "week-20").mkdir(parents=True)
    (tmp_path / "P1" / "week-020").mkdir(parents=True)
    with pytest.raises(DuplicateTimepointError):
        index_dataset(tmp_path, None)


def test_index_schema_validated(tmp_path):
    (tmp_path / "data").mkdir()
    meta = tmp_path / "meta.csv"
    _write_meta(meta, [["P1", "20", "PD"]], header=("patient", "week", "rating"))
    with pytest.raises(MetadataSchemaError):
        index_dataset(tmp_path / "data", meta)


def test_index_tolerates_extra_columns_and_tabs(tmp_path):
    d = tmp_path / "data" / "P1" / "week-20"
    d.mkdir(parents=True)
    (d / "FLAIR.nii").touch()
    meta = tmp_path / "meta.tsv"
    meta.write_text("scanner\tpatient\tweek\trating\tsurgery_week\nX\tP1\t20\tPR\t0\n")
    idx = index_dataset(tmp_path / "data", meta)
    assert idx.records[0].label is RanoLabel.PR
    assert idx.surgery_weeks == {"P1": 0}


def test_census_fixture_counts(census):
    idx = index_dataset(census.root, census.metadata)
    assert len(idx.records) == 638
    assert len({r.patient_id for r in idx.records}) == 91
    tally = {c: sum(r.label is c for r in idx.records) for c in CLASS_ORDER}
    assert tally == {RanoLabel.PD: 253, RanoLabel.SD: 97, RanoLabel.PR: 20, RanoLabel.CR: 27}
    assert len(filter_timepoints(idx.records, idx.surgery_weeks)) == 366


def test_filter_excludes_early_response():
    out = filter_timepoints([rec("p", 2, "PD"), rec("p", 13, "PD"), rec("p", 12, "SD")], {"p": 0})
    assert [r.week for r in out] == [13]


def test_filter_drops_patient_without_surgery_week(caplog):
    with caplog.at_level(logging.WARNING):
        out = filter_timepoints([rec("p", 30, "PD"), rec("q", 30, "PD")], {"p": None, "q": 0})
    assert [r.patient_id for r in out] == ["q"]
    assert "p has no surgery week" in caplog.text


def test_filter_twenty_records_match_oracle():
    from rano_response.synthetic import SessionTruth

    # every rule violated at least once, including a missing surgery date
    plan = [
        ("a", -1, "PreOp", ALL), ("a", 0, "PostOp", ALL), ("a", 8, "PD", ALL), ("a", 13, "SD", ALL),
        ("a", 20, "Unlabeled", ALL), ("a", 25, "PD", ()), ("a", 30, "CR", (Modality.CT1,)),
        ("b", 10, "PR", ALL), ("b", 14, "PR", ALL), ("b", 26, "SD", ALL), ("b", 40, "PD", ALL),
        ("c", 30, "PD", ALL), ("c", 40, "PD", ALL),
        ("d", 16, "SD", ALL), ("d", 17, "PD", ALL), ("d", 29, "CR", (Modality.FLAIR,)),
        ("d", 35, "PostOp", ALL), ("d", 45, "PD", ALL), ("d", 50, "SD", ALL), ("d", 60, "PR", ALL),
    ]
    surgery = {"a": 0, "b": 1, "c": None, "d": 4}
    records = [rec(p, w, l, m) for p, w, l, m in plan]
    truth = [SessionTruth(p, w, RanoLabel(l), canonical_modalities(m)) for p, w, l, m in plan]
    got = [(r.patient_id, r.week) for r in filter_timepoints(records, surgery)]
    assert got == oracle_filter(truth, surgery)
    assert len(records) == 20


def test_pair_examples():
    tps = [rec("p", 20, "SD"), rec("p", 30, "SD"), rec("p", 45, "PD")]
    out = pair_consecutive(tps, ALL)
    assert [s.label for s in out] == [RanoLabel.SD, RanoLabel.PD]
    tps[1] = rec("p", 30, "SD", (Modality.CT1, Modality.T1W, Modality.T2W))
    assert pair_consecutive(tps, {Modality.CT1, Modality.FLAIR}) == []


def test_pair_single_timepoint_gives_nothing():
    assert pair_consecutive([rec("p", 20, "SD")], ALL) == []


def test_sample_rejects_bad_pairs():
    with pytest.raises(ValueError):
        StudySample("p", rec("p", 30, "SD"), rec("p", 20, "PD"), ALL)
    with pytest.raises(ValueError):
        StudySample("p", rec("p", 20, "SD"), rec("p", 30, "PostOp"), ALL)


@pytest.mark.parametrize("mods", STUDY_MODALITY_SETS, ids=modality_key)
def test_census_pairing_matches_oracle(census, mods):
    idx = index_dataset(census.root, census.metadata)
    samples = build_cohort(idx, mods)
    got = {(s.patient_id, s.prev.week, s.curr.week, s.label) for s in samples}
    assert got == oracle_pairs(census.sessions, census.surgery_weeks, mods)
    assert len(got) == len(samples)


def test_ten_patient_cohort_matches_oracle(tmp_path):
    truth = make_synthetic_cohort(tmp_path / "c", n_patients=10, seed=11, write_images=False)
    idx = index_dataset(truth.root, truth.metadata)
    for mods in STUDY_MODALITY_SETS:
        got = {(s.patient_id, s.prev.week, s.curr.week, s.label) for s in build_cohort(idx, mods)}
        assert got == oracle_pairs(truth.sessions, truth.surgery_weeks, mods)


def test_summary_uniform():
    tps = [rec("p", 20 + 10 * i, lab) for i, lab in enumerate(["SD", "PD", "SD", "PR", "CR"])]
    s = cohort_summary(pair_consecutive(tps, ALL))
    assert all(v == 0.25 for v in s.prevalence.values())
    with pytest.raises(EmptyCohortError):
        cohort_summary([])


def test_manifest_round_trip(tmp_path):
    tps = [rec("p", 20, "SD"), rec("p", 30, "PD")]
    samples = pair_consecutive(tps, ALL)
    path = write_manifest(samples, tmp_path / "m.jsonl")
    assert read_manifest(path) == samples
    line = json.loads(path.read_text().splitlines()[0])
    assert line["label"] == "PD" and line["id"] == "p:20-30"


# properties

labels = st.sampled_from(["PD", "SD", "PR", "CR", "PreOp", "PostOp", "Unlabeled"])
mod_sets = st.sets(st.sampled_from(ALL)).map(canonical_modalities)


@st.composite
def cohorts(draw):
    records = []
    surgery = {}
    for p in range(draw(st.integers(1, 4))):
        pid = f"p{p}"
        surgery[pid] = draw(st.one_of(st.none(), st.integers(-2, 10)))
        weeks = draw(st.lists(st.integers(-5, 80), min_size=0, max_size=7, unique=True))
        for w in weeks:
            records.append(rec(pid, w, draw(labels), draw(mod_sets)))
    return records, surgery


@settings(max_examples=80, deadline=None)
@given(cohorts())
def test_filter_idempotent(data):
    records, surgery = data
    once = filter_timepoints(records, surgery)
    assert filter_timepoints(once, surgery) == once
    assert all(r in records for r in once)


@settings(max_examples=80, deadline=None)
@given(cohorts(), mod_sets, mod_sets)
def test_pairing_monotone_in_modalities(data, a, b):
    records, surgery = data
    filtered = filter_timepoints(records, surgery)
    small = canonical_modalities(set(a))
    big = canonical_modalities(set(a) | set(b))
    ids_big = {(s.patient_id, s.prev.week, s.curr.week) for s in pair_consecutive(filtered, big)}
    ids_small = {(s.patient_id, s.prev.week, s.curr.week) for s in pair_consecutive(filtered, small)}
    assert ids_big <= ids_small


@settings(max_examples=80, deadline=None)
@given(cohorts(), mod_sets)
def test_samples_stay_inside_patient_and_filter(data, mods):
    records, surgery = data
    filtered = filter_timepoints(records, surgery)
    kept = {(r.patient_id, r.week) for r in filtered}
    samples = pair_consecutive(filtered, mods)
    for s in samples:
        assert s.prev.patient_id == s.curr.patient_id == s.patient_id
        assert (s.patient_id, s.prev.week) in kept and (s.patient_id, s.curr.week) in kept
        between = [w for p, w in kept if p == s.patient_id and s.prev.week < w < s.curr.week]
        assert between == []
    if samples:
        summary = cohort_summary(samples)
        assert summary.total == len(samples) == sum(summary.counts.values())
        assert abs(sum(summary.prevalence.values()) - 1.0) <= 1e-12
