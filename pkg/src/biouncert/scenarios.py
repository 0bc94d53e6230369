"""Record-level synthetic cohorts with controlled segmentation corruption.

These skip voxel simulation entirely: each subject gets a true volume from
the planted linear model, a segmentation quality (IoU) and a CV, and an
observed volume corrupted in proportion to ``1 - IoU``. They are cheap
enough to replicate hundreds of times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Cohort, ConfidenceKind, SubjectRecord, rng_for
from .phantom import EffectSpec


@dataclass(frozen=True)
class CorruptionSpec:
    """How segmentation failures corrupt the measured volume.

    A subject fails with probability ``fail_rate`` (times
    ``diabetic_fail_ratio`` for diabetics). Failed segmentations get IoU in
    ``failed_iou``, the rest in ``good_iou``. The observed volume is
    ``V * (1 - shrink * (1 - IoU) + noise * (1 - IoU) * z)`` with standard
    normal ``z``; CV is ``cv_scale * (1 - IoU)`` times log-normal jitter.
    """

    fail_rate: float = 0.25
    diabetic_fail_ratio: float = 1.6
    good_iou: tuple[float, float] = (0.85, 0.98)
    failed_iou: tuple[float, float] = (0.3, 0.8)
    shrink: float = 0.25
    noise: float = 0.15
    cv_scale: float = 0.3
    cv_jitter: float = 0.2


NO_CORRUPTION = CorruptionSpec(fail_rate=0.0, shrink=0.0, noise=0.0)


def corrupted_cohort(
    seed: int,
    n_subjects: int = 308,
    n_diabetic: int = 109,
    effect: EffectSpec = EffectSpec(),
    corruption: CorruptionSpec = CorruptionSpec(),
) -> Cohort:
    """Cohort whose ``volume_mm3`` is the corrupted measurement.

    Extras carry ``true_volume_mm3``, ``iou``, ``cv`` and ``inv_cv``.
    """
    rng = rng_for(seed)
    n = n_subjects
    diabetes = np.zeros(n, dtype=int)
    diabetes[:n_diabetic] = 1
    rng.shuffle(diabetes)
    age = rng.normal(effect.age_mean, effect.age_sd, n)
    sex = rng.integers(0, 2, n)
    bmi = rng.normal(effect.bmi_mean, effect.bmi_sd, n)
    true = (
        effect.intercept
        + effect.age * (age - effect.age_mean) / effect.age_sd
        + effect.sex * sex
        + effect.bmi * (bmi - effect.bmi_mean) / effect.bmi_sd
        + effect.diabetes * diabetes
        + rng.normal(0.0, 1.0, n) * effect.noise_sd
    )
    fail_p = np.clip(corruption.fail_rate * np.where(diabetes == 1, corruption.diabetic_fail_ratio, 1.0), 0, 1)
    failed = rng.random(n) < fail_p
    iou = np.where(failed, rng.uniform(*corruption.failed_iou, n), rng.uniform(*corruption.good_iou, n))
    miss = 1.0 - iou
    observed = true * (1.0 - corruption.shrink * miss + corruption.noise * miss * rng.normal(0.0, 1.0, n))
    cv = corruption.cv_scale * miss * np.exp(rng.normal(0.0, corruption.cv_jitter, n))
    if np.any(observed < 0) or np.any(true < 0):
        raise ValueError("scenario produced negative volumes")
    width = len(str(n - 1))
    records = [
        SubjectRecord(
            subject_id=f"s{i:0{width}d}",
            age_years=float(age[i]),
            sex=int(sex[i]),
            bmi=float(bmi[i]),
            diabetes=int(diabetes[i]),
            volume_mm3=float(observed[i]),
            confidence=float(iou[i]),
            confidence_kind=ConfidenceKind.IOU,
            extras={
                "true_volume_mm3": float(true[i]),
                "iou": float(iou[i]),
                "cv": float(cv[i]),
                "inv_cv": float(1.0 / cv[i]) if cv[i] > 0 else float("inf"),
            },
        )
        for i in range(n)
    ]
    return Cohort(tuple(records))


def chance_cohort(seed: int, n_subjects: int = 308) -> Cohort:
    """Balanced classes; volume and confidences independent of the label."""
    rng = rng_for(seed)
    n = n_subjects
    diabetes = np.zeros(n, dtype=int)
    diabetes[: n // 2] = 1
    rng.shuffle(diabetes)
    volume = rng.normal(60000.0, 8000.0, n)
    iou = rng.uniform(0.5, 0.98, n)
    cv = rng.uniform(0.005, 0.1, n)
    records = [
        SubjectRecord(
            subject_id=f"s{i}",
            age_years=float(rng.normal(55, 10)),
            sex=int(rng.integers(0, 2)),
            bmi=float(rng.normal(27, 4)),
            diabetes=int(diabetes[i]),
            volume_mm3=float(volume[i]),
            confidence=float(iou[i]),
            extras={"iou": float(iou[i]), "cv": float(cv[i]), "inv_cv": float(1 / cv[i])},
        )
        for i in range(n)
    ]
    return Cohort(tuple(records))


# confidence differs strongly between diagnostic groups
GROUP_CONFIDENCE_SHIFT = CorruptionSpec(fail_rate=0.2, diabetic_fail_ratio=3.0)
