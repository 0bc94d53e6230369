"""Per-organ confidence measures, volumes, Dice and voxel-wise uncertainty."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LIVER, LabelVolume, SampleStack


class UndefinedCVError(ValueError):
    """No sample in the stack contains the organ, so the mean volume is zero."""


@dataclass(frozen=True)
class ConfidenceReport:
    subject_id: str
    iou: float
    cv: float
    inv_cv: float
    volumes_mm3: tuple[float, ...]
    mean_volume_mm3: float
    consensus_volume_mm3: float
    empty_union: bool = False
    cv_undefined: bool = False

    @property
    def inv_cv_infinite(self) -> bool:
        return math.isinf(self.inv_cv)


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    values: np.ndarray


def stack_iou_flagged(stack: SampleStack) -> tuple[float, bool]:
    """IoU across all samples plus a flag set when the union is empty."""
    masks = stack.masks()
    union = int(np.count_nonzero(masks.any(axis=0)))
    if union == 0:
        return 0.0, True
    inter = int(np.count_nonzero(masks.all(axis=0)))
    return inter / union, False


def stack_iou(stack: SampleStack) -> float:
    """|S_1 ∩ ... ∩ S_N| / |S_1 ∪ ... ∪ S_N| for the stack's organ label.

    An empty union (no sample found the organ) gives 0.
    """
    return stack_iou_flagged(stack)[0]


def volume_of(vol: LabelVolume, organ_label: int = LIVER) -> float:
    return int(np.count_nonzero(vol.labels == organ_label)) * vol.voxel_volume_mm3


def stack_volumes(stack: SampleStack) -> np.ndarray:
    return np.array([volume_of(s, stack.organ_label) for s in stack.samples])


def cv_of_volumes(volumes) -> tuple[float, float]:
    """Population coefficient of variation and its inverse (``inf`` when cv is 0)."""
    v = np.asarray(volumes, dtype=float)
    mu = float(np.mean(v))
    if mu == 0:
        raise UndefinedCVError("mean volume is zero; CV is undefined")
    cv = math.sqrt(float(np.sum((v - mu) ** 2)) / (v.size * mu * mu))
    # identical volumes can leave rounding residue in the mean
    if np.all(v == v[0]):
        cv = 0.0
    return cv, (1.0 / cv if cv > 0 else math.inf)


def stack_cv(stack: SampleStack) -> tuple[float, float]:
    return cv_of_volumes(stack_volumes(stack))


def dice(pred: LabelVolume, truth: LabelVolume, organ_label: int = LIVER) -> float:
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {truth.dims}")
    p = pred.labels == organ_label
    t = truth.labels == organ_label
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & t)) / total


def foreground_frequency(stack: SampleStack) -> np.ndarray:
    return stack.masks().sum(axis=0) / stack.n


def uncertainty_map(stack: SampleStack) -> UncertaintyMap:
    """Binary entropy (bits) of each voxel's foreground frequency."""
    p = foreground_frequency(stack)
    h = np.zeros_like(p)
    mid = (p > 0) & (p < 1)
    q = p[mid]
    h[mid] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
    return UncertaintyMap(stack.dims, stack.spacing_mm, np.clip(h, 0.0, 1.0))


def consensus_mask(stack: SampleStack) -> LabelVolume:
    """Voxelwise majority vote; even-N ties go to foreground."""
    votes = stack.masks().sum(axis=0)
    fg = 2 * votes >= stack.n
    return LabelVolume.from_mask(fg, stack.spacing_mm, stack.organ_label)


def confidence_report(stack: SampleStack) -> ConfidenceReport:
    """All per-subject measures for one stack.

    A stack with no organ voxels at all gets cv = inf and inv_cv = 0 (zero
    confidence) instead of raising, so cohort pipelines keep going.
    """
    iou, empty = stack_iou_flagged(stack)
    volumes = stack_volumes(stack)
    try:
        cv, inv_cv = cv_of_volumes(volumes)
        undefined = False
    except UndefinedCVError:
        cv, inv_cv, undefined = math.inf, 0.0, True
    consensus = volume_of(consensus_mask(stack), stack.organ_label)
    return ConfidenceReport(
        subject_id=stack.subject_id,
        iou=iou,
        cv=cv,
        inv_cv=inv_cv,
        volumes_mm3=tuple(float(v) for v in volumes),
        mean_volume_mm3=float(np.mean(volumes)),
        consensus_volume_mm3=consensus,
        empty_union=empty,
        cv_undefined=undefined,
    )


def clip_inv_cv(values, cap: float | None = None, percentile: float = 99.0) -> np.ndarray:
    """Replace infinite CV^-1 values and clip everything to ``cap``.

    The default cap is the given percentile of the finite values; with no
    finite values at all every subject is equally (fully) confident and
    gets 1.
    """
    v = np.asarray(values, dtype=float)
    finite = v[np.isfinite(v)]
    if cap is None:
        if finite.size == 0:
            return np.ones_like(v)
        cap = float(np.percentile(finite, percentile))
    return np.minimum(v, cap)
