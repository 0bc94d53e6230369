import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biouncert.core import Cohort, LabelVolume, SampleStack, SubjectRecord
from biouncert.evaluation import (
    CLF_VARIANTS,
    GROUP_VARIANTS,
    KINDS,
    SplitSpec,
    classification_row,
    classification_study,
    dice_study,
    group_study,
    manual_beta4,
    prepare_cohort,
    split_indices,
    study_columns,
)
from biouncert.phantom import EffectSpec, SamplerConfig, SamplerKind, simulate_cohort
from biouncert.scenarios import NO_CORRUPTION, chance_cohort, corrupted_cohort
from biouncert.stats import ClfModelSpec, Variant, build_design, fit_logistic, predict


def _mask(n_on, dims=(1, 1, 4)):
    m = np.zeros(dims, bool)
    m.flat[:n_on] = True
    return LabelVolume.from_mask(m, (1, 1, 1))


def test_dice_study_two_point():
    # consensus of two 2-voxel masks against 3-voxel truth: 2*2/5 = 0.8
    stacks = [SampleStack("a", (_mask(2), _mask(2))), SampleStack("b", (_mask(3), _mask(3)))]
    summary = dice_study(stacks, {"a": _mask(3), "b": _mask(3)})
    assert summary.mean == pytest.approx(0.9, abs=1e-12)
    assert summary.std == pytest.approx(0.1, abs=1e-12)
    assert summary.per_subject == pytest.approx({"a": 0.8, "b": 1.0})


def test_dice_study_requires_matching_ids():
    with pytest.raises(ValueError, match="differ"):
        dice_study([SampleStack("a", (_mask(2), _mask(2)))], {"b": _mask(2)})


def test_dice_study_identity():
    stacks = [SampleStack(k, (_mask(n), _mask(n))) for k, n in (("a", 1), ("b", 3))]
    summary = dice_study(stacks, {"a": _mask(1), "b": _mask(3)})
    assert (summary.mean, summary.std) == (1.0, 0.0)


def _dropout_dice(rate):
    sim = simulate_cohort(20, 0.35, EffectSpec(), SamplerConfig(SamplerKind.MC_DROPOUT, dropout_rate=rate), seed=1)
    truths = {s.subject_id: ph.truth for s, ph in zip(sim.stacks, sim.phantoms)}
    return dice_study(sim.stacks, truths)


def test_more_dropout_lowers_dice():
    low, high = _dropout_dice(0.1), _dropout_dice(0.3)
    assert high.mean < low.mean
    assert 0.8 < high.mean <= 1.0


def test_columns():
    cols = study_columns(GROUP_VARIANTS, KINDS)
    assert [c.label for c in cols] == ["Base", "Variable IoU", "Variable CV^-1", "Instance IoU", "Instance CV^-1"]
    assert [c.key for c in study_columns(CLF_VARIANTS, ["iou"])] == ["base", "variable_iou", "interaction_iou", "instance_iou"]


# --- group analysis ------------------------------------------------------------------


def test_noise_free_group_study_recovers_planted_effect():
    effect = replace(EffectSpec(), noise_sd=0.0)
    cohort = corrupted_cohort(3, 120, 40, effect, NO_CORRUPTION)
    report = group_study({"clean": cohort}, standardize_volume=False)
    assert report.references["clean"] == pytest.approx(effect.diabetes, abs=1e-6)
    for col in report.columns:
        assert report.value("clean", col.key) == pytest.approx(effect.diabetes, abs=1e-6)


def test_group_study_shape_and_reference_modes():
    cohorts = {f"m{i}": corrupted_cohort(i, 100, 35) for i in range(3)}
    report = group_study(cohorts)
    assert list(report.rows) == ["m0", "m1", "m2"]
    assert all(len(row) == 5 for row in report.rows.values())
    assert report.references["m1"] == pytest.approx(manual_beta4(cohorts["m1"]))
    fixed = group_study(cohorts, reference_beta4=0.25)
    assert set(fixed.references.values()) == {0.25}
    ranked = fixed.ranking("m0")
    assert ranked[0][0] == fixed.best_key("m0")
    assert [d for _, d in ranked] == sorted(d for _, d in ranked)


def test_group_study_records_failures():
    # IoU confidences only: the CV^-1 columns fail, the rest survive
    recs = tuple(SubjectRecord(f"s{i}", 50.0 + i, i % 2, 25.0 + (i * 7) % 5, int(i % 3 == 0), 6e4 + 100 * i, 0.8 + 0.01 * ((3 * i) % 7)) for i in range(20))
    report = group_study({"m": Cohort(recs)})
    failed = {key for _, key, _ in report.failed_cells}
    assert failed == {"variable_invcv", "instance_invcv"}
    assert report.value("m", "base") is not None


def test_prepare_cohort_standardizes():
    c = prepare_cohort(corrupted_cohort(0, 50, 20))
    for col in ("age", "bmi", "volume_mm3"):
        z = c.column(col)
        assert abs(z.mean()) < 1e-10 and abs(z.std() - 1) < 1e-10


# --- splits ---------------------------------------------------------------------


def test_split_is_deterministic_and_partitions():
    labels = np.array([1] * 109 + [0] * 199)
    spec = SplitSpec(seed=5)
    a = split_indices(labels, spec, 3)
    b = split_indices(labels, spec, 3)
    np.testing.assert_array_equal(a[0], b[0])
    train, test, _ = a
    assert np.intersect1d(train, test).size == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([train, test])), np.arange(308))
    c = split_indices(labels, spec, 4)
    assert not np.array_equal(train, c[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.floats(0.1, 0.9), st.integers(0, 1000))
def test_stratified_split_preserves_class_fractions(n1, n0, frac, repeat):
    labels = np.array([1] * n1 + [0] * n0)
    train, test, _ = split_indices(labels, SplitSpec(train_fraction=frac, seed=1), repeat)
    for cls, size in ((1, n1), (0, n0)):
        in_train = int(np.sum(labels[train] == cls))
        assert abs(in_train - frac * size) <= 1
        assert 1 <= in_train <= size - 1


def test_unstratified_split_has_both_classes():
    labels = np.array([1] * 3 + [0] * 40)
    spec = SplitSpec(stratified=False, train_fraction=0.2, seed=2)
    for r in range(50):
        train, _, _ = split_indices(labels, spec, r)
        assert set(labels[train]) == {0, 1}


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(n_repeats=0)
    with pytest.raises(ValueError):
        SplitSpec(train_fraction=1.0)


# --- classification ------------------------------------------------------------------


def _separable_cohort(n=40):
    recs = []
    for i in range(n):
        d = int(i % 2)
        recs.append(SubjectRecord(f"s{i}", 50.0, 0, 25.0, d, 5e4 + 2e4 * d + 10.0 * i, 0.9, "iou", {"iou": 0.9}))
    return Cohort(tuple(recs))


def test_separable_volume_is_perfectly_classified():
    cells = classification_row(_separable_cohort(), [Variant.BASE], [], SplitSpec(n_repeats=20))
    assert cells["base"].value == 1.0
    assert cells["base"].extra["diverged"] == 20


def test_chance_accuracy_is_bounded():
    cells = classification_row(chance_cohort(1, 100), split=SplitSpec(n_repeats=30))
    for cell in cells.values():
        assert 0.0 <= cell.value <= 1.0
        assert 0.0 <= cell.extra["std"] <= 0.5


def test_accuracy_is_mean_of_per_repeat_accuracies():
    cohort = corrupted_cohort(4, 80, 30)
    spec = SplitSpec(n_repeats=15, seed=9)
    cells = classification_row(cohort, [Variant.BASE, Variant.INTERACTION], ["iou"], spec)
    prepared = prepare_cohort(cohort)
    labels = prepared.raw("diabetes").astype(int)
    design = build_design(prepared, ClfModelSpec(Variant.INTERACTION, "iou"))
    accs = []
    for r in range(15):
        train, test, _ = split_indices(labels, spec, r)
        fit = fit_logistic(design.take(train))
        accs.append(np.mean(predict(fit, design.take(test)) == labels[test]))
    assert cells["interaction_iou"].value == pytest.approx(np.mean(accs), abs=1e-15)
    assert cells["interaction_iou"].extra["std"] == pytest.approx(np.std(accs), abs=1e-15)


def test_jobs_do_not_change_results():
    cohorts = {"a": corrupted_cohort(2, 90, 30)}
    spec = SplitSpec(n_repeats=25, seed=3)
    one = classification_study(cohorts, split=spec, jobs=1)
    four = classification_study(cohorts, split=spec, jobs=4)
    assert one.rows == four.rows
    assert one.references == four.references
    assert math.isfinite(one.references["a"])
