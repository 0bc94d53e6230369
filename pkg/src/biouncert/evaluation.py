"""Study protocols: Dice per method, coefficient comparison, repeated-split classification."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .confidence import consensus_mask, dice
from .core import Cohort, ConfidenceKind, LabelVolume, SampleStack, rng_for, standardize
from .stats import (
    ClfModelSpec,
    ConvergenceWarning,
    GroupModelSpec,
    Variant,
    build_design,
    fit_logistic,
    fit_model,
    predict,
)

GROUP_VARIANTS = (Variant.BASE, Variant.VARIABLE, Variant.INSTANCE)
CLF_VARIANTS = (Variant.BASE, Variant.VARIABLE, Variant.INTERACTION, Variant.INSTANCE)
KINDS = (ConfidenceKind.IOU, ConfidenceKind.INVCV)
MAX_RESAMPLES = 10


# --- report structure ------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    variant: Variant
    kind: ConfidenceKind | None = None

    @property
    def label(self) -> str:
        name = self.variant.value.capitalize()
        if self.kind is None:
            return name
        return f"{name} {'IoU' if self.kind is ConfidenceKind.IOU else 'CV^-1'}"

    @property
    def key(self) -> str:
        return self.variant.value if self.kind is None else f"{self.variant.value}_{self.kind.value}"


def study_columns(variants: Iterable[Variant], kinds: Iterable[ConfidenceKind]) -> list[Column]:
    cols = []
    kinds = list(kinds)
    for v in variants:
        v = Variant(v)
        if v is Variant.BASE:
            cols.append(Column(v))
        else:
            cols.extend(Column(v, ConfidenceKind(k)) for k in kinds)
    return cols


@dataclass
class Cell:
    value: float | None
    failed: str | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class StudyReport:
    """One table: rows are segmentation methods, columns are model variants.

    ``best`` says which cell in a row is bolded: ``"max"`` for accuracies,
    ``"closest"`` for coefficients compared against the row's reference.
    """

    title: str
    metric: str
    columns: list[Column]
    reference_label: str = "Reference"
    best: str = "max"
    rows: dict[str, dict[str, Cell]] = field(default_factory=dict)
    references: dict[str, float | None] = field(default_factory=dict)

    def add_row(self, method: str, cells: Mapping[str, Cell], reference: float | None = None) -> None:
        self.rows[method] = dict(cells)
        self.references[method] = reference

    @property
    def failed_cells(self) -> list[tuple[str, str, str]]:
        return [(m, k, c.failed) for m, row in self.rows.items() for k, c in row.items() if c.failed]

    def value(self, method: str, column_key: str) -> float | None:
        return self.rows[method][column_key].value

    def best_key(self, method: str) -> str | None:
        row = self.rows[method]
        values = {k: c.value for k, c in row.items() if c.value is not None and math.isfinite(c.value)}
        if not values:
            return None
        if self.best == "closest":
            ref = self.references.get(method)
            if ref is None:
                return None
            return min(values, key=lambda k: abs(values[k] - ref))
        return max(values, key=values.get)

    def ranking(self, method: str) -> list[tuple[str, float]]:
        """Column keys ordered by |value - reference|, closest first."""
        ref = self.references.get(method)
        if ref is None:
            return []
        row = self.rows[method]
        pairs = [(k, abs(c.value - ref)) for k, c in row.items() if c.value is not None]
        return sorted(pairs, key=lambda kv: kv[1])


# --- Dice -----------------------------------------------------------------------


@dataclass(frozen=True)
class DiceSummary:
    mean: float
    std: float
    per_subject: dict[str, float]


def dice_study(stacks: Sequence[SampleStack], truths: Mapping[str, LabelVolume]) -> DiceSummary:
    """Consensus-vs-truth Dice per subject; mean and population std."""
    ids = [s.subject_id for s in stacks]
    if set(ids) != set(truths):
        missing = sorted(set(ids) ^ set(truths))
        raise ValueError(f"subject ids of stacks and truths differ: {', '.join(missing[:5])}")
    scores = {s.subject_id: dice(consensus_mask(s), truths[s.subject_id], s.organ_label) for s in stacks}
    values = np.array(list(scores.values()))
    return DiceSummary(float(values.mean()), float(values.std()), scores)


# --- group analysis ----------------------------------------------------------------


def prepare_cohort(cohort: Cohort, standardize_volume: bool = True, covariates: bool = True) -> Cohort:
    columns = (["age", "bmi"] if covariates else []) + (["volume_mm3"] if standardize_volume else [])
    return standardize(cohort, columns)


def group_row(
    cohort: Cohort,
    variants: Iterable[Variant] = GROUP_VARIANTS,
    kinds: Iterable[ConfidenceKind] = KINDS,
    standardize_volume: bool = True,
) -> dict[str, Cell]:
    prepared = prepare_cohort(cohort, standardize_volume)
    cells = {}
    for col in study_columns(variants, kinds):
        try:
            spec = GroupModelSpec(col.variant, col.kind)
            fit = fit_model(build_design(prepared, spec))
            cells[col.key] = Cell(fit.coefficients["beta_4"])
        except (ValueError, np.linalg.LinAlgError) as exc:
            cells[col.key] = Cell(None, failed=str(exc))
    return cells


def manual_beta4(cohort: Cohort, column: str = "true_volume_mm3", standardize_volume: bool = True) -> float:
    """Diabetes coefficient of the base model fitted on reference (truth) volumes."""
    ref = prepare_cohort(cohort.with_volume_from(column), standardize_volume)
    return fit_model(build_design(ref, GroupModelSpec())).coefficients["beta_4"]


def group_study(
    cohorts: Mapping[str, Cohort],
    variants: Iterable[Variant] = GROUP_VARIANTS,
    kinds: Iterable[ConfidenceKind] = KINDS,
    reference_beta4: float | Mapping[str, float] | None = None,
    standardize_volume: bool = True,
    reference_label: str = "Manual",
) -> StudyReport:
    """Diabetes coefficient per method and variant, with a reference column.

    Without an explicit reference each row uses the base model fitted on
    the cohort's ``true_volume_mm3`` column, playing the role of manual
    annotations.
    """
    variants = list(variants)
    kinds = list(kinds)
    report = StudyReport(
        title="Regression coefficient of diabetes status (beta_4)",
        metric="beta_4",
        columns=study_columns(variants, kinds),
        reference_label=reference_label,
        best="closest",
    )
    for method, cohort in cohorts.items():
        if isinstance(reference_beta4, Mapping):
            ref = reference_beta4.get(method)
        elif reference_beta4 is not None:
            ref = float(reference_beta4)
        elif cohort.has_column("true_volume_mm3"):
            ref = manual_beta4(cohort, standardize_volume=standardize_volume)
        else:
            ref = None
        report.add_row(method, group_row(cohort, variants, kinds, standardize_volume), ref)
    return report


# --- classification ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    n_repeats: int = 1000
    train_fraction: float = 0.5
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be at least 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


def split_indices(labels, spec: SplitSpec, repeat: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Train/test indices for one repeat plus the number of resamples needed.

    Stratified splits shuffle each class independently and put
    ``ceil(n_class * train_fraction)`` of it (at most ``n_class - 1``) in the
    training set. Unstratified draws whose training set holds a single
    class are redrawn, up to ``MAX_RESAMPLES`` times.
    """
    labels = np.asarray(labels)
    n = labels.size
    for attempt in range(MAX_RESAMPLES + 1):
        rng = rng_for(spec.seed, repeat, attempt)
        if spec.stratified:
            train = []
            for cls in np.unique(labels):
                members = np.flatnonzero(labels == cls)
                rng.shuffle(members)
                k = min(math.ceil(members.size * spec.train_fraction - 1e-9), members.size - 1)
                train.append(members[: max(k, 1)])
            train = np.sort(np.concatenate(train))
        else:
            k = min(max(math.ceil(n * spec.train_fraction - 1e-9), 1), n - 1)
            train = np.sort(rng.permutation(n)[:k])
        if np.unique(labels[train]).size > 1 or np.unique(labels).size < 2:
            break
    else:
        raise RuntimeError(f"repeat {repeat}: no two-class training split after {MAX_RESAMPLES} resamples")
    test = np.setdiff1d(np.arange(n), train)
    return train, test, attempt


def _run_repeats(designs, labels, spec: SplitSpec, repeats: Sequence[int]):
    acc = np.full((len(repeats), len(designs)), np.nan)
    diverged = np.zeros(len(designs), dtype=int)
    resamples = 0
    errors: dict[int, str] = {}
    for r_i, r in enumerate(repeats):
        train, test, tries = split_indices(labels, spec, r)
        resamples += tries
        for j, design in enumerate(designs):
            if design is None:
                continue
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fit = fit_logistic(design.take(train))
                diverged[j] += not fit.converged
                pred = predict(fit, design.take(test))
                acc[r_i, j] = float(np.mean(pred == labels[test]))
            except ValueError as exc:
                errors.setdefault(j, str(exc))
    return acc, diverged, resamples, errors


def classification_row(
    cohort: Cohort,
    variants: Iterable[Variant] = CLF_VARIANTS,
    kinds: Iterable[ConfidenceKind] = KINDS,
    split: SplitSpec = SplitSpec(),
    include_covariates: bool = False,
    jobs: int = 1,
) -> dict[str, Cell]:
    """Mean test accuracy over ``split.n_repeats`` random splits, per variant.

    Every variant sees the same sequence of splits. Volumes are z-scored
    over the whole cohort; CV^-1 is clipped with the whole-cohort cap.
    """
    prepared = prepare_cohort(cohort, standardize_volume=True, covariates=include_covariates)
    labels = prepared.raw("diabetes").astype(int)
    columns = study_columns(variants, kinds)
    designs, cells = [], {}
    for col in columns:
        try:
            designs.append(build_design(prepared, ClfModelSpec(col.variant, col.kind, include_covariates)))
        except ValueError as exc:
            designs.append(None)
            cells[col.key] = Cell(None, failed=str(exc))

    repeats = list(range(split.n_repeats))
    jobs = max(1, min(jobs, len(repeats)))
    chunks = [repeats[i::jobs] for i in range(jobs)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(lambda ch: _run_repeats(designs, labels, split, ch), chunks))
    else:
        parts = [_run_repeats(designs, labels, split, repeats)]

    acc = np.full((len(repeats), len(designs)), np.nan)
    diverged = np.zeros(len(designs), dtype=int)
    resamples = 0
    errors: dict[int, str] = {}
    for chunk, (a, d, rs, err) in zip(chunks, parts):
        acc[chunk] = a
        diverged += d
        resamples += rs
        for j, msg in err.items():
            errors.setdefault(j, msg)

    for j, col in enumerate(columns):
        if col.key in cells:
            continue
        if j in errors:
            cells[col.key] = Cell(None, failed=errors[j])
            continue
        per_repeat = acc[:, j]
        cells[col.key] = Cell(
            float(np.mean(per_repeat)),
            extra={"std": float(np.std(per_repeat)), "diverged": int(diverged[j]), "resamples": int(resamples)},
        )
    return cells


def classification_study(
    cohorts: Mapping[str, Cohort],
    variants: Iterable[Variant] = CLF_VARIANTS,
    kinds: Iterable[ConfidenceKind] = KINDS,
    split: SplitSpec = SplitSpec(),
    include_covariates: bool = False,
    reference: Mapping[str, float] | None = None,
    jobs: int = 1,
    reference_label: str = "Manual",
) -> StudyReport:
    variants = list(variants)
    kinds = list(kinds)
    report = StudyReport(
        title="Mean accuracy for diabetes classification",
        metric="accuracy",
        columns=study_columns(variants, kinds),
        reference_label=reference_label,
        best="max",
    )
    for method, cohort in cohorts.items():
        if reference is not None:
            ref = reference.get(method)
        elif cohort.has_column("true_volume_mm3"):
            ref = manual_accuracy(cohort, split, include_covariates, jobs)
        else:
            ref = None
        report.add_row(method, classification_row(cohort, variants, kinds, split, include_covariates, jobs), ref)
    return report


def manual_accuracy(cohort: Cohort, split: SplitSpec, include_covariates: bool = False, jobs: int = 1) -> float | None:
    """Base-model accuracy on the truth volumes, the analogue of manual annotations."""
    cell = classification_row(cohort.with_volume_from("true_volume_mm3"), [Variant.BASE], [], split, include_covariates, jobs)
    return cell["base"].value
