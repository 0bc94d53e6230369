"""Shared data types, file formats and seed plumbing."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DIMS = (53, 256, 144)
DEFAULT_SPACING = (3.0, 2.0, 2.0)
DEFAULT_N_SAMPLES = 10
LIVER = 1

LABEL_MAGIC = "blv1"
FLOAT_MAGIC = "bfv1"

COHORT_COLUMNS = (
    "subject_id",
    "age",
    "sex",
    "bmi",
    "diabetes",
    "volume_mm3",
    "confidence",
    "confidence_kind",
)
NUMERIC_COLUMNS = ("age", "sex", "bmi", "diabetes", "volume_mm3", "confidence")


class FormatError(ValueError):
    """Raised for malformed volume or cohort files."""


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams for different keys never share state, so work split across
    threads draws the same numbers as a serial loop.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def _as_triple(values, name, kind=float) -> tuple:
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    return out


@dataclass(frozen=True, eq=False)
class LabelVolume:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    labels: np.ndarray

    def __post_init__(self):
        dims = _as_triple(self.dims, "dims", int)
        spacing = _as_triple(self.spacing_mm, "spacing_mm", float)
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        labels = np.asarray(self.labels)
        if labels.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"labels has {labels.size} entries, dims {dims} need {math.prod(dims)}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ValueError("labels must fit in uint8")
            labels = labels.astype(np.uint8)
        labels = np.ascontiguousarray(labels.reshape(dims))
        labels.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_mask(cls, mask, spacing_mm=DEFAULT_SPACING, organ_label: int = LIVER) -> "LabelVolume":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask.shape, spacing_mm, mask.astype(np.uint8) * np.uint8(organ_label))

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx

    def mask(self, organ_label: int = LIVER) -> np.ndarray:
        return self.labels == organ_label

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class SampleStack:
    subject_id: str
    samples: tuple[LabelVolume, ...]
    organ_label: int = LIVER

    def __post_init__(self):
        samples = tuple(self.samples)
        if len(samples) < 2:
            raise ValueError("a sample stack needs at least 2 samples")
        first = samples[0]
        for s in samples[1:]:
            if s.dims != first.dims or s.spacing_mm != first.spacing_mm:
                raise ValueError("all samples in a stack must share dims and spacing")
        object.__setattr__(self, "samples", samples)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.samples[0].dims

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return self.samples[0].spacing_mm

    def masks(self) -> np.ndarray:
        """Boolean array of shape ``(N, nz, ny, nx)``."""
        return np.stack([s.labels == self.organ_label for s in self.samples])


class ConfidenceKind(str, enum.Enum):
    IOU = "iou"
    INVCV = "invcv"

    @property
    def column(self) -> str:
        """Name of the cohort column holding this measure."""
        return "iou" if self is ConfidenceKind.IOU else "inv_cv"


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age_years: float
    sex: int
    bmi: float
    diabetes: int
    volume_mm3: float
    confidence: float = 1.0
    confidence_kind: ConfidenceKind = ConfidenceKind.IOU
    extras: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.sex not in (0, 1):
            raise ValueError(f"{self.subject_id}: sex must be 0 or 1, got {self.sex}")
        if self.diabetes not in (0, 1):
            raise ValueError(f"{self.subject_id}: diabetes must be 0 or 1, got {self.diabetes}")
        if not self.volume_mm3 >= 0:
            raise ValueError(f"{self.subject_id}: volume must be nonnegative")
        kind = ConfidenceKind(self.confidence_kind)
        object.__setattr__(self, "confidence_kind", kind)
        if kind is ConfidenceKind.IOU and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"{self.subject_id}: IoU confidence must lie in [0, 1]")
        if kind is ConfidenceKind.INVCV and not self.confidence >= 0:
            raise ValueError(f"{self.subject_id}: CV^-1 confidence must be nonnegative")
        object.__setattr__(self, "extras", dict(self.extras))

    def value(self, column: str) -> float:
        if column == "age":
            return self.age_years
        if column in ("sex", "bmi", "diabetes", "volume_mm3", "confidence"):
            return float(getattr(self, column))
        try:
            return float(self.extras[column])
        except KeyError:
            raise KeyError(f"{self.subject_id}: no column {column!r}") from None


@dataclass(frozen=True)
class Cohort:
    """Subject records plus frozen per-column ``(mean, std)`` z-scoring stats.

    Records always keep raw values; :meth:`column` applies the frozen
    standardization on read.
    """

    records: tuple[SubjectRecord, ...]
    standardization: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        records = tuple(self.records)
        ids = [r.subject_id for r in records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate subject_id: {', '.join(dup)}")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "standardization", dict(self.standardization))

    def __len__(self):
        return len(self.records)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    @property
    def extra_columns(self) -> list[str]:
        cols: dict[str, None] = {}
        for r in self.records:
            cols.update(dict.fromkeys(r.extras))
        return list(cols)

    def raw(self, column: str) -> np.ndarray:
        return np.array([r.value(column) for r in self.records], dtype=float)

    def column(self, column: str) -> np.ndarray:
        values = self.raw(column)
        if column in self.standardization:
            mean, std = self.standardization[column]
            values = (values - mean) / std
        return values

    def has_column(self, column: str) -> bool:
        return all(_has(r, column) for r in self.records) and len(self.records) > 0

    def confidence(self, kind: ConfidenceKind) -> np.ndarray:
        """Confidence values of ``kind``, from its dedicated column if present."""
        kind = ConfidenceKind(kind)
        out = []
        for r in self.records:
            if kind.column in r.extras:
                out.append(float(r.extras[kind.column]))
            elif r.confidence_kind is kind:
                out.append(r.confidence)
            else:
                raise KeyError(f"{r.subject_id}: no {kind.value} confidence")
        return np.array(out, dtype=float)

    def with_records(self, records: Iterable[SubjectRecord]) -> "Cohort":
        return Cohort(tuple(records))

    def subset(self, index: Sequence[int]) -> "Cohort":
        return Cohort(tuple(self.records[i] for i in index), self.standardization)

    def with_volume_from(self, column: str) -> "Cohort":
        """Copy whose biomarker volume is taken from another column (unstandardized)."""
        records = [replace(r, volume_mm3=r.value(column)) for r in self.records]
        stats = {k: v for k, v in self.standardization.items() if k != "volume_mm3"}
        return Cohort(tuple(records), stats)


def _has(record: SubjectRecord, column: str) -> bool:
    try:
        record.value(column)
    except KeyError:
        return False
    return True


def standardize(cohort: Cohort, columns: Iterable[str]) -> Cohort:
    """Freeze population mean/std for ``columns``; already frozen columns are kept."""
    stats = dict(cohort.standardization)
    for name in columns:
        if name in stats:
            continue
        values = cohort.raw(name)
        std = float(values.std())
        if not std > 0:
            raise ValueError(f"column {name!r} has zero variance")
        stats[name] = (float(values.mean()), std)
    return Cohort(cohort.records, stats)


# --- label volume files -------------------------------------------------


def _write_header(fh, magic, dims, spacing):
    header = {"magic": magic, "dims": list(dims), "spacing_mm": list(spacing)}
    fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")


def _read_header(data: bytes, magic: str):
    end = data.find(b"\n")
    if end < 0:
        raise FormatError("missing header terminator")
    try:
        header = json.loads(data[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or "magic" not in header:
        raise FormatError("malformed header: no magic")
    if header["magic"] != magic:
        if isinstance(header["magic"], str) and header["magic"][:3] == magic[:3]:
            raise FormatError(f"unsupported version {header['magic']!r}, expected {magic!r}")
        raise FormatError(f"bad magic {header['magic']!r}")
    try:
        dims = _as_triple(header["dims"], "dims", int)
        spacing = _as_triple(header["spacing_mm"], "spacing_mm", float)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    if any(d <= 0 for d in dims) or any(not s > 0 for s in spacing):
        raise FormatError("malformed header: dims and spacing must be positive")
    return dims, spacing, data[end + 1 :]


def write_label_volume(vol: LabelVolume, path) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, LABEL_MAGIC, vol.dims, vol.spacing_mm)
        fh.write(vol.labels.tobytes(order="C"))


def read_label_volume(path) -> LabelVolume:
    data = Path(path).read_bytes()
    dims, spacing, payload = _read_header(data, LABEL_MAGIC)
    expected = dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header dims need {expected}")
    return LabelVolume(dims, spacing, np.frombuffer(payload, dtype=np.uint8))


def write_float_volume(values: np.ndarray, spacing_mm, path) -> None:
    """Float field in the ``bfv1`` variant: same header, little-endian float32 payload."""
    values = np.asarray(values)
    with open(path, "wb") as fh:
        _write_header(fh, FLOAT_MAGIC, values.shape, spacing_mm)
        fh.write(values.astype("<f4").tobytes(order="C"))


def read_float_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    data = Path(path).read_bytes()
    dims, spacing, payload = _read_header(data, FLOAT_MAGIC)
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header dims need {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(float), spacing


# --- cohort CSV -----------------------------------------------------------


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"row {row}: non-numeric {column!r} value {text!r}") from None


def _parse_binary(text: str, row: int, column: str) -> int:
    value = _parse_float(text, row, column)
    if value not in (0.0, 1.0):
        raise FormatError(f"row {row}: {column!r} must be 0 or 1, got {text!r}")
    return int(value)


def parse_cohort_csv(text: str) -> Cohort:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in COHORT_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"missing column(s): {', '.join(missing)}")
    extra_cols = [c for c in header if c not in COHORT_COLUMNS]
    records = []
    for i, row in enumerate(reader, start=2):
        kind = row["confidence_kind"].strip().lower()
        if kind not in ("iou", "invcv"):
            raise FormatError(f"row {i}: confidence_kind must be iou or invcv, got {kind!r}")
        extras = {c: _parse_float(row[c], i, c) for c in extra_cols if row[c] not in ("", None)}
        try:
            records.append(
                SubjectRecord(
                    subject_id=row["subject_id"],
                    age_years=_parse_float(row["age"], i, "age"),
                    sex=_parse_binary(row["sex"], i, "sex"),
                    bmi=_parse_float(row["bmi"], i, "bmi"),
                    diabetes=_parse_binary(row["diabetes"], i, "diabetes"),
                    volume_mm3=_parse_float(row["volume_mm3"], i, "volume_mm3"),
                    confidence=_parse_float(row["confidence"], i, "confidence"),
                    confidence_kind=ConfidenceKind(kind),
                    extras=extras,
                )
            )
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"row {i}: {exc}") from None
    try:
        return Cohort(tuple(records))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def read_cohort_csv(path) -> Cohort:
    return parse_cohort_csv(Path(path).read_text(encoding="utf-8"))


def _fmt(x: float) -> str:
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def format_cohort_csv(cohort: Cohort) -> str:
    extra = cohort.extra_columns
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(COHORT_COLUMNS) + extra)
    for r in cohort.records:
        writer.writerow(
            [
                r.subject_id,
                _fmt(r.age_years),
                r.sex,
                _fmt(r.bmi),
                r.diabetes,
                _fmt(r.volume_mm3),
                _fmt(r.confidence),
                r.confidence_kind.value,
            ]
            + [_fmt(r.extras[c]) if c in r.extras else "" for c in extra]
        )
    return out.getvalue()


def write_cohort_csv(cohort: Cohort, path) -> None:
    Path(path).write_text(format_cohort_csv(cohort), encoding="utf-8")
