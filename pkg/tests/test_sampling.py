import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rano_response.cohort import MODALITY_ORDER, RanoLabel, StudySample, TimepointRecord
from rano_response.sampling import (
    AugmentationPolicy,
    DegenerateSamplerError,
    FoldPlan,
    augment,
    class_loss_weights_from_labels,
    compute_class_loss_weights,
    compute_sample_weights,
    make_folds,
    sample_rng,
    weighted_draw,
)

PUBLISHED_PREVALENCE = (0.67, 0.20, 0.06, 0.07)
LABELS = [RanoLabel.PD, RanoLabel.SD, RanoLabel.PR, RanoLabel.CR]


def _tp(pid, week, label):
    return TimepointRecord(pid, week, label, MODALITY_ORDER, {m: "x" for m in MODALITY_ORDER})


def make_samples(counts, patients=None):
    out = []
    k = 0
    for c, n in enumerate(counts):
        for _ in range(n):
            pid = f"p{k if patients is None else k % patients}"
            w = 20 + 2 * k
            out.append(StudySample(pid, _tp(pid, w, RanoLabel.SD), _tp(pid, w + 1, LABELS[c]), MODALITY_ORDER))
            k += 1
    return out


def test_folds_published_cohort_counts():
    plan = make_folds(make_samples((67, 20, 6, 7)), 5, seed=0)
    assert set(plan.per_fold_class_counts[:, 0]) <= {13, 14}
    assert plan.per_fold_class_counts.sum() == 100
    assert plan.warnings == []


def test_folds_one_class_per_fold():
    plan = make_folds(make_samples((5, 0, 0, 0)), 5, seed=3)
    assert sorted(plan.assignments.values()) == [0, 1, 2, 3, 4]


def test_folds_deterministic_and_round_trip(tmp_path):
    s = make_samples((30, 10, 4, 6))
    a, b = make_folds(s, 5, seed=7), make_folds(s, 5, seed=7)
    assert a.assignments == b.assignments
    back = FoldPlan.load(a.save(tmp_path / "f.json"))
    assert back.assignments == a.assignments
    np.testing.assert_array_equal(back.per_fold_class_counts, a.per_fold_class_counts)


def test_rare_class_warns():
    plan = make_folds(make_samples((10, 10, 2, 3)), 5, seed=0)
    assert len(plan.warnings) == 2
    assert any("PR" in w for w in plan.warnings)


def test_folds_need_two():
    with pytest.raises(ValueError):
        make_folds(make_samples((3, 3, 0, 0)), 1)


def test_patient_grouping_keeps_patients_together():
    s = make_samples((40, 15, 5, 5), patients=13)
    plan = make_folds(s, 5, seed=1, group_by_patient=True)
    by_patient = {}
    for x in s:
        by_patient.setdefault(x.patient_id, set()).add(plan.assignments[x.id])
    assert all(len(v) == 1 for v in by_patient.values())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=4, max_size=4).filter(lambda c: sum(c) >= 2),
       st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_stratification_property(counts, n_folds, seed):
    s = make_samples(counts)
    plan = make_folds(s, n_folds, seed)
    assert set(plan.assignments) == {x.id for x in s}
    pf = plan.per_fold_class_counts
    assert np.all(pf.max(0) - pf.min(0) <= 1)
    # each fold serves once as test split
    for f in range(n_folds):
        assert set(plan.test_ids(f)).isdisjoint(plan.train_ids(f))


def test_sample_weights_published_prevalences():
    ids = ["a", "b", "c", "d"]
    sw = compute_sample_weights(ids, LABELS, PUBLISHED_PREVALENCE)
    assert sw.weights == pytest.approx({"a": 0.33, "b": 0.80, "c": 0.94, "d": 0.93}, abs=1e-12)
    sym = compute_sample_weights(["x", "y"], [RanoLabel.PD, RanoLabel.SD], (0.5, 0.5, 0.0, 0.0))
    assert set(sym.weights.values()) == {0.5}


def test_single_class_sampler_is_degenerate():
    with pytest.raises(DegenerateSamplerError):
        compute_sample_weights(["a", "b"], [RanoLabel.PD, RanoLabel.PD])
    with pytest.raises(ValueError):
        compute_sample_weights(["a"], [RanoLabel.PD], (0.5, 0.2, 0.1, 0.1))


def _published_cohort():
    counts = (67, 20, 6, 7)
    ids = [f"s{i}" for i in range(100)]
    labels = [c for c, n in enumerate(counts) for _ in range(n)]
    return counts, ids, labels


def test_weighted_draw_chi_square():
    counts, ids, labels = _published_cohort()
    sw = compute_sample_weights(ids, labels, PUBLISHED_PREVALENCE)
    draws = weighted_draw(sw, 100_000, seed=0)
    cls = dict(zip(ids, labels))
    observed = np.bincount([cls[d] for d in draws], minlength=4)
    w = np.array([0.33, 0.80, 0.94, 0.93])
    expected_p = np.array(counts) * w / (np.array(counts) * w).sum()
    assert np.all(np.abs(observed / 1e5 - expected_p) < 0.01)
    assert stats.chisquare(observed, expected_p * 1e5).pvalue > 0.01


def test_weighted_draw_edge_cases():
    uni = weighted_draw({str(i): 1.0 for i in range(4)}, 100_000, seed=1)
    freq = np.bincount([int(u) for u in uni], minlength=4) / 1e5
    assert np.all(np.abs(freq - 0.25) < 0.01)
    assert set(weighted_draw({"a": 0.0, "b": 0.7, "c": 0.0}, 50, seed=2)) == {"b"}
    assert weighted_draw({"a": 1.0, "b": 2.0}, 20, 5) == weighted_draw({"a": 1.0, "b": 2.0}, 20, 5)
    with pytest.raises(DegenerateSamplerError):
        weighted_draw({"a": 0.0}, 3, 0)


def test_class_loss_weights():
    np.testing.assert_allclose(compute_class_loss_weights(PUBLISHED_PREVALENCE),
                               [1 / 0.67, 5.0, 1 / 0.06, 1 / 0.07], rtol=1e-12)
    assert compute_class_loss_weights(PUBLISHED_PREVALENCE)[0] == pytest.approx(1.4925373, abs=1e-7)
    np.testing.assert_array_equal(compute_class_loss_weights([0.25] * 4), [4.0] * 4)
    np.testing.assert_allclose(compute_class_loss_weights(PUBLISHED_PREVALENCE) * PUBLISHED_PREVALENCE, 1.0)


def test_zero_prevalence_smoothed():
    w = class_loss_weights_from_labels([0, 0, 0, 1, 1, 2])
    # counts (3, 2, 1, 0) + 1 -> (4, 3, 2, 1) / 10
    np.testing.assert_allclose(w, [10 / 4, 10 / 3, 10 / 2, 10.0])


def test_augment_identity_when_disabled():
    x = np.random.default_rng(0).normal(size=(3, 5, 6, 7)).astype(np.float32)
    np.testing.assert_array_equal(augment(x, AugmentationPolicy.disabled(), np.random.default_rng(1)), x)


def test_flip_involution_and_channel_consistency():
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 6)).astype(np.float32)
    x[1] = x[0] * 2
    pol = AugmentationPolicy(1.0, 0.0, 0.1, 0.0, (0.7, 1.5), 0.0, 0.0, 0.1)
    once = augment(x, pol, np.random.default_rng(3))
    np.testing.assert_array_equal(once[1], once[0] * 2)
    np.testing.assert_array_equal(once, x[:, ::-1, ::-1, ::-1])
    np.testing.assert_array_equal(augment(once, pol, np.random.default_rng(3)), x)


def test_intensity_scale_oracle():
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 3)).astype(np.float32)
    pol = AugmentationPolicy(0.0, 1.0, 0.1, 0.0, (0.7, 1.5), 0.0, 0.0, 0.1)
    out = augment(x, pol, np.random.default_rng(11))
    # replay the draw order: 3 flips, scale gate, scale value
    r = np.random.default_rng(11)
    r.random(3)
    r.random()
    u = r.uniform(-0.1, 0.1)
    assert -0.1 <= u <= 0.1
    oracle = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        oracle[idx] = x[idx] * np.float32(1 + u)
    np.testing.assert_array_equal(out, oracle)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(flip_prob_per_axis=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(gamma_range=(1.5, 0.7))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 50))
def test_augment_deterministic_per_stream(seed, epoch):
    x = np.random.default_rng(0).random((2, 4, 4, 4)).astype(np.float32)
    pol = AugmentationPolicy(seed=seed)
    a = augment(x, pol, sample_rng(seed, "P:1-2", epoch))
    b = augment(x, pol, sample_rng(seed, "P:1-2", epoch))
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
