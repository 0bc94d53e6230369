import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biouncert.core import (
    DEFAULT_DIMS,
    Cohort,
    ConfidenceKind,
    FormatError,
    LabelVolume,
    SubjectRecord,
    format_cohort_csv,
    parse_cohort_csv,
    read_cohort_csv,
    read_label_volume,
    rng_for,
    standardize,
    write_cohort_csv,
    write_label_volume,
)

HEADER = "subject_id,age,sex,bmi,diabetes,volume_mm3,confidence,confidence_kind\n"


def _blv(path, header: dict, payload: bytes):
    path.write_bytes(json.dumps(header).encode() + b"\n" + payload)


def test_minimal_volume(tmp_path):
    f = tmp_path / "one.blv1"
    _blv(f, {"magic": "blv1", "dims": [1, 1, 1], "spacing_mm": [3, 2, 2]}, bytes([1]))
    vol = read_label_volume(f)
    assert vol.dims == (1, 1, 1)
    assert vol.spacing_mm == (3.0, 2.0, 2.0)
    assert int(np.count_nonzero(vol.labels)) == 1


def test_short_payload_rejected(tmp_path):
    f = tmp_path / "short.blv1"
    _blv(f, {"magic": "blv1", "dims": [2, 2, 2], "spacing_mm": [1, 1, 1]}, bytes(7))
    with pytest.raises(FormatError, match="payload"):
        read_label_volume(f)


@pytest.mark.parametrize(
    "raw, match",
    [
        (b"not json\n\x00", "malformed"),
        (b'{"magic":"blv2","dims":[1,1,1],"spacing_mm":[1,1,1]}\n\x00', "unsupported version"),
        (b'{"magic":"blv1","dims":[1,1],"spacing_mm":[1,1,1]}\n\x00', "malformed"),
        (b'{"magic":"blv1","dims":[1,1,1],"spacing_mm":[1,1,1]}', "terminator"),
    ],
)
def test_bad_headers(tmp_path, raw, match):
    f = tmp_path / "bad.blv1"
    f.write_bytes(raw)
    with pytest.raises(FormatError, match=match):
        read_label_volume(f)


def test_round_trip_random_volume(tmp_path):
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, size=(5, 6, 7)).astype(np.uint8)
    vol = LabelVolume((5, 6, 7), (3.0, 2.0, 2.0), labels)
    write_label_volume(vol, tmp_path / "v.blv1")
    back = read_label_volume(tmp_path / "v.blv1")
    data = (tmp_path / "v.blv1").read_bytes()
    # byte-level oracle: payload after the header is exactly the C-order label bytes
    assert data[data.index(b"\n") + 1 :] == labels.tobytes(order="C")
    assert back == vol


def test_header_records_spacing(tmp_path):
    vol = LabelVolume((2, 2, 2), (3, 2, 2), np.zeros(8, np.uint8))
    write_label_volume(vol, tmp_path / "v.blv1")
    line = (tmp_path / "v.blv1").read_bytes().split(b"\n", 1)[0]
    assert json.loads(line) == {"magic": "blv1", "dims": [2, 2, 2], "spacing_mm": [3.0, 2.0, 2.0]}


def test_full_size_payload(tmp_path):
    assert 53 * 256 * 144 == 1_953_792
    vol = LabelVolume(DEFAULT_DIMS, (3, 2, 2), np.zeros(DEFAULT_DIMS, np.uint8))
    write_label_volume(vol, tmp_path / "big.blv1")
    data = (tmp_path / "big.blv1").read_bytes()
    payload = data[data.index(b"\n") + 1 :]
    assert len(payload) == 1_953_792
    assert not any(payload)


@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    spacing=st.tuples(*[st.floats(0.1, 10, allow_nan=False)] * 3),
    data=st.data(),
)
def test_volume_round_trip_property(tmp_path_factory, dims, spacing, data):
    n = dims[0] * dims[1] * dims[2]
    labels = data.draw(st.binary(min_size=n, max_size=n))
    vol = LabelVolume(dims, spacing, np.frombuffer(labels, np.uint8))
    path = tmp_path_factory.mktemp("rt") / "v.blv1"
    write_label_volume(vol, path)
    assert read_label_volume(path) == vol


def test_label_volume_invariants():
    with pytest.raises(ValueError):
        LabelVolume((2, 2, 2), (1, 1, 1), np.zeros(7, np.uint8))
    with pytest.raises(ValueError):
        LabelVolume((2, 2, 2), (1, 0, 1), np.zeros(8, np.uint8))


# --- cohort CSV -------------------------------------------------------------------


def test_one_row_csv(tmp_path):
    f = tmp_path / "c.csv"
    f.write_text(HEADER + "s1,50,1,27.5,0,1500000,0.9,iou\n")
    cohort = read_cohort_csv(f)
    assert len(cohort) == 1
    r = cohort.records[0]
    assert (r.age_years, r.sex, r.bmi, r.diabetes, r.volume_mm3, r.confidence) == (50, 1, 27.5, 0, 1500000, 0.9)
    assert r.confidence_kind is ConfidenceKind.IOU


def test_duplicate_id_rejected():
    with pytest.raises(FormatError, match="duplicate"):
        parse_cohort_csv(HEADER + "s1,50,1,27.5,0,1,0.9,iou\ns1,51,0,27.5,1,1,0.9,iou\n")


@pytest.mark.parametrize(
    "text, match",
    [
        ("subject_id,age\ns1,3\n", "missing column"),
        (HEADER + "s1,fifty,1,27.5,0,1,0.9,iou\n", "non-numeric"),
        (HEADER + "s1,50,2,27.5,0,1,0.9,iou\n", "sex"),
        (HEADER + "s1,50,1,27.5,0.5,1,0.9,iou\n", "diabetes"),
        (HEADER + "s1,50,1,27.5,0,1,0.9,dice\n", "confidence_kind"),
    ],
)
def test_csv_errors(text, match):
    with pytest.raises(FormatError, match=match):
        parse_cohort_csv(text)


def _synthetic_csv(n=308, n_diabetic=109, seed=0):
    rng = np.random.default_rng(seed)
    diabetes = np.array([1] * n_diabetic + [0] * (n - n_diabetic))
    rng.shuffle(diabetes)
    lines = [HEADER.strip()]
    for i in range(n):
        lines.append(
            f"s{i},{rng.normal(55, 10)},{rng.integers(0, 2)},{rng.normal(27, 4)},{diabetes[i]},"
            f"{rng.normal(1.5e6, 2e5)},{rng.uniform(0.5, 1)},iou"
        )
    return "\n".join(lines) + "\n"


def test_synthetic_cohort_counts():
    cohort = parse_cohort_csv(_synthetic_csv())
    assert len(cohort) == 308
    assert sum(r.diabetes for r in cohort.records) == 109


def test_csv_fixed_point(tmp_path):
    first = parse_cohort_csv(_synthetic_csv(40, 15, seed=3))
    text = format_cohort_csv(first)
    second = parse_cohort_csv(text)
    assert format_cohort_csv(second) == text
    assert second.records == first.records


def test_csv_extras_and_infinite_inv_cv(tmp_path):
    rec = SubjectRecord("a", 50, 0, 25, 1, 10.0, float("inf"), "invcv", {"iou": 0.5, "inv_cv": float("inf")})
    cohort = Cohort((rec, SubjectRecord("b", 60, 1, 30, 0, 12.0, 3.0, "invcv", {"iou": 1.0})))
    write_cohort_csv(cohort, tmp_path / "c.csv")
    back = read_cohort_csv(tmp_path / "c.csv")
    assert back.records[0].extras == {"iou": 0.5, "inv_cv": float("inf")}
    assert back.records[1].extras == {"iou": 1.0}
    assert np.isinf(back.confidence(ConfidenceKind.INVCV)[0])


# --- standardization ------------------------------------------------------------------


def _cohort_with_ages(ages):
    return Cohort(tuple(SubjectRecord(f"s{i}", a, 0, 25.0, i % 2, 1.0) for i, a in enumerate(ages)))


def test_standardize_hand_values():
    z = standardize(_cohort_with_ages([1, 2, 3]), ["age"]).column("age")
    # population std of [1,2,3] is sqrt(2/3) = 0.8165
    np.testing.assert_allclose(z, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_standardize_idempotent_on_standard_data():
    ages = np.array([-1.224744871391589, 0.0, 1.224744871391589])
    z = standardize(_cohort_with_ages(ages), ["age"]).column("age")
    np.testing.assert_allclose(z, ages, atol=1e-12)


def test_standardize_constant_column():
    with pytest.raises(ValueError, match="zero variance"):
        standardize(_cohort_with_ages([4, 4, 4]), ["age"])


def test_frozen_stats_are_kept():
    c = standardize(_cohort_with_ages([1, 2, 3]), ["age"])
    again = standardize(c, ["age"])
    assert again.standardization["age"] == c.standardization["age"]
    # raw values are never overwritten
    np.testing.assert_array_equal(again.raw("age"), [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=50).filter(lambda v: np.std(v) > 1e-3))
def test_standardize_property(values):
    z = standardize(_cohort_with_ages(values), ["age"]).column("age")
    assert abs(z.mean()) < 1e-10
    assert abs(z.std() - 1) < 1e-10


def test_rng_streams_are_deterministic_and_distinct():
    a = rng_for(7, 1, 2).random(5)
    np.testing.assert_array_equal(a, rng_for(7, 1, 2).random(5))
    assert not np.array_equal(a, rng_for(7, 2, 1).random(5))
    with pytest.raises(ValueError):
        rng_for(-1)
