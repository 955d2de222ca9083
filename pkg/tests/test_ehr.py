import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mplite.ehr import (AdmissionEvent, DiagnosisEvent, LabEvent, MIMIC3_N_DIAG_CODES, MIMIC3_N_LAB_ITEMS,
                        PatientRecord, Visit, Vocabulary, assemble_patients, build_vocabulary, encode_visit,
                        is_heart_failure_code, load_table, make_samples, make_window_samples, select_cohorts,
                        split_dataset, validate_vocab_size)
from mplite.errors import IngestError, ValidationError


def write(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------- tables


def test_load_labevents(tmp_path):
    p = write(tmp_path / "labevents.csv",
              "patient_id,visit_id,item_code,abnormal,timestamp\n"
              "1,10,50820,1,100\n1,10,50821,0,110\n2,20,50820,0,200\n")
    events = load_table(p, "labevents")
    assert len(events) == 3
    assert events[0] == LabEvent("1", "10", "50820", True, 100)
    assert events[1].abnormal is False


def test_load_row_missing_item_code(tmp_path):
    p = write(tmp_path / "labevents.csv", "patient_id,visit_id,item_code,abnormal,timestamp\n1,10,,1,100\n")
    with pytest.raises(IngestError, match="row 2"):
        load_table(p, "labevents")


def test_load_empty_file_with_header(tmp_path):
    p = write(tmp_path / "diagnoses.csv", "patient_id,visit_id,icd_code\n")
    assert load_table(p, "diagnoses") == []


def test_load_missing_file(tmp_path):
    with pytest.raises(IngestError, match="not found"):
        load_table(tmp_path / "nope.csv", "admissions")


def test_load_missing_column(tmp_path):
    p = write(tmp_path / "admissions.csv", "patient_id,visit_id\n1,10\n")
    with pytest.raises(IngestError, match="admit_time"):
        load_table(p, "admissions")


def test_load_bad_timestamp_names_first_row(tmp_path):
    p = write(tmp_path / "admissions.csv", "patient_id,visit_id,admit_time\n1,10,5\n1,11,yesterday\n1,12,x\n")
    with pytest.raises(IngestError, match="row 3"):
        load_table(p, "admissions")


def test_load_bad_abnormal_flag(tmp_path):
    p = write(tmp_path / "labevents.csv", "patient_id,visit_id,item_code,abnormal,timestamp\n1,10,a,yes,1\n")
    with pytest.raises(IngestError, match="abnormal"):
        load_table(p, "labevents")


# ---------------------------------------------------------------- vocabulary


def test_vocabulary_dedup_and_order():
    v = build_vocabulary(["428.0", "250.00", "428.0"], "diagnosis")
    assert v.size == 2
    assert v.code_to_index == {"250.00": 0, "428.0": 1}


def test_vocabulary_from_events():
    v = build_vocabulary([DiagnosisEvent("1", "a", "x"), DiagnosisEvent("1", "a", "b")], "diagnosis")
    assert v.codes == ("b", "x")


def test_vocabulary_empty():
    assert build_vocabulary([], "lab").size == 0


@given(st.sets(st.text(min_size=1, max_size=5), max_size=30))
def test_vocabulary_roundtrip(codes):
    v = Vocabulary("lab", codes)
    assert sorted(v.code_to_index.values()) == list(range(v.size))
    for i in range(v.size):
        assert v.code_to_index[v.index_to_code(i)] == i


def test_vocabulary_fingerprint_tracks_content():
    a = Vocabulary("lab", ["a", "b"])
    assert a.fingerprint() == Vocabulary("lab", ["b", "a"]).fingerprint()  # same sorted content
    assert a.fingerprint() != Vocabulary("lab", ["a", "c"]).fingerprint()
    assert a.fingerprint() != Vocabulary("diagnosis", ["a", "b"]).fingerprint()


def test_vocab_size_validation_hook():
    v = Vocabulary("lab", [str(i) for i in range(MIMIC3_N_LAB_ITEMS)])
    assert validate_vocab_size(v, MIMIC3_N_LAB_ITEMS)
    d = Vocabulary("diagnosis", [str(i) for i in range(10)])
    with pytest.warns(UserWarning, match=str(MIMIC3_N_DIAG_CODES)):
        assert not validate_vocab_size(d, MIMIC3_N_DIAG_CODES)
    with pytest.raises(ValidationError):
        validate_vocab_size(d, MIMIC3_N_DIAG_CODES, strict=True)


# ---------------------------------------------------------------- assembly


def test_visits_sorted_even_when_file_is_not():
    adm = [AdmissionEvent("p", "v2", 200), AdmissionEvent("p", "v1", 100)]
    dx = [DiagnosisEvent("p", "v1", "a"), DiagnosisEvent("p", "v2", "b")]
    (p,) = assemble_patients(adm, dx, [])
    assert [v.visit_id for v in p.visits] == ["v1", "v2"]
    assert p.T == 2


def test_timestamp_ties_broken_by_visit_id():
    adm = [AdmissionEvent("p", "b", 100), AdmissionEvent("p", "a", 100)]
    (p,) = assemble_patients(adm, [], [])
    assert [v.visit_id for v in p.visits] == ["a", "b"]


def test_lab_recency_abnormal_then_normal():
    adm = [AdmissionEvent("p", "v1", 100), AdmissionEvent("p", "v2", 200)]
    labs = [LabEvent("p", "v1", "k", True, 90), LabEvent("p", "v2", "k", False, 190)]
    (p,) = assemble_patients(adm, [], labs)
    assert p.visits[0].lab_abnormal == {"k"}
    assert p.visits[1].lab_abnormal == frozenset()


def test_lab_carried_forward_when_not_retested():
    adm = [AdmissionEvent("p", "v1", 100), AdmissionEvent("p", "v2", 200)]
    labs = [LabEvent("p", "v1", "k", True, 90)]
    (p,) = assemble_patients(adm, [], labs)
    assert p.visits[1].lab_abnormal == {"k"}


def test_lab_after_admission_not_visible():
    adm = [AdmissionEvent("p", "v1", 100)]
    labs = [LabEvent("p", "v1", "k", True, 101)]
    (p,) = assemble_patients(adm, [], labs)
    assert p.visits[0].lab_abnormal == frozenset()
    assert p.n_lab_events == 1


def test_patient_without_labs():
    adm = [AdmissionEvent("p", "v1", 100), AdmissionEvent("p", "v2", 300)]
    (p,) = assemble_patients(adm, [DiagnosisEvent("p", "v1", "a")], [])
    assert all(v.lab_abnormal == frozenset() for v in p.visits)


def test_unknown_visit_reference():
    adm = [AdmissionEvent("p", "v1", 100)]
    with pytest.raises(IngestError, match="row 7"):
        assemble_patients(adm, [DiagnosisEvent("p", "zz", "a", row=7)], [])
    with pytest.raises(IngestError, match="unknown visit"):
        assemble_patients(adm, [], [LabEvent("p", "zz", "k", True, 1)])


def test_visit_owned_by_other_patient():
    adm = [AdmissionEvent("p", "v1", 100)]
    with pytest.raises(IngestError, match="belongs to"):
        assemble_patients(adm, [DiagnosisEvent("q", "v1", "a")], [])


@st.composite
def lab_histories(draw):
    n_visits = draw(st.integers(1, 5))
    times = sorted(draw(st.lists(st.integers(0, 50), min_size=n_visits, max_size=n_visits, unique=True)))
    adm = [AdmissionEvent("p", f"v{i}", t) for i, t in enumerate(times)]
    n_ev = draw(st.integers(0, 25))
    labs = [LabEvent("p", f"v{draw(st.integers(0, n_visits - 1))}", draw(st.sampled_from("abc")),
                     draw(st.booleans()), draw(st.integers(0, 60))) for _ in range(n_ev)]
    return adm, labs


@settings(max_examples=200, deadline=None)
@given(lab_histories())
def test_recency_matches_brute_force_replay(data):
    adm, labs = data
    (p,) = assemble_patients(adm, [], labs)
    times = [v.admit_time for v in p.visits]
    assert times == sorted(times)
    for v in p.visits:
        for item in "abc":
            seen = [e for e in labs if e.item_code == item and e.timestamp <= v.admit_time]
            if not seen:
                expected = False
            else:
                latest = max(e.timestamp for e in seen)
                expected = any(e.abnormal for e in seen if e.timestamp == latest)
            assert (item in v.lab_abnormal) == expected


# ---------------------------------------------------------------- encoding


def test_encode_visit_bits():
    dv = Vocabulary("diagnosis", ["c0", "c1", "c2", "c3"])
    lv = Vocabulary("lab", ["l0", "l1", "l2"])
    xd, xl = encode_visit(Visit("v", 0, frozenset({"c0", "c2"})), dv, lv)
    np.testing.assert_array_equal(xd, [1, 0, 1, 0])
    np.testing.assert_array_equal(xl, [0, 0, 0])


def test_encode_unknown_code_policies():
    dv = Vocabulary("diagnosis", ["a"])
    lv = Vocabulary("lab", [])
    counter = Counter()
    xd, _ = encode_visit(Visit("v", 0, frozenset({"a", "zzz"})), dv, lv, counter=counter)
    np.testing.assert_array_equal(xd, [1])
    assert counter["diagnosis_dropped"] == 1
    with pytest.raises(ValidationError):
        encode_visit(Visit("v", 0, frozenset({"zzz"})), dv, lv, policy="error")


@given(st.sets(st.sampled_from(list("abcdefgh"))), st.sets(st.sampled_from(list("abcdxyz"))))
def test_encoding_roundtrip(vocab_codes, visit_codes):
    v = Vocabulary("diagnosis", vocab_codes)
    assert v.decode(v.encode(visit_codes)) == visit_codes & set(vocab_codes)


# ---------------------------------------------------------------- cohorts


def _patient(pid, n_visits, labs=0, empty_visit=None):
    visits = tuple(Visit(f"{pid}{i}", i, frozenset() if i == empty_visit else frozenset({"d"}))
                   for i in range(n_visits))
    return PatientRecord(pid, visits, labs)


def test_cohort_rules():
    pats = [_patient("single_labs", 1, labs=3), _patient("gap", 3, labs=1, empty_visit=1),
            _patient("nolabs", 2, labs=0)]
    pre, pred = select_cohorts(pats)
    assert "single_labs" in pre and "single_labs" not in pred
    assert "gap" not in pred and "gap" in pre
    assert "nolabs" in pred and "nolabs" not in pre


# ---------------------------------------------------------------- splits


def _cohort(n):
    from mplite.ehr import Cohort
    return Cohort("prediction", frozenset(f"p{i:02d}" for i in range(n)))


def test_split_sizes_and_determinism():
    a = split_dataset(_cohort(10), (0.8, 0.1, 0.1), 7)
    b = split_dataset(_cohort(10), (0.8, 0.1, 0.1), 7)
    assert (len(a.train), len(a.val), len(a.test)) == (8, 1, 1)
    assert a == b


def test_split_seed_sensitivity():
    a = split_dataset(_cohort(50), (0.8, 0.1, 0.1), 7)
    b = split_dataset(_cohort(50), (0.8, 0.1, 0.1), 8)
    assert (len(a.train), len(a.val), len(a.test)) == (len(b.train), len(b.val), len(b.test))
    assert a.train != b.train


def test_split_empty_test_warns():
    with pytest.warns(UserWarning, match="test"):
        s = split_dataset(_cohort(10), (0.5, 0.5, 0.0), 1)
    assert not s.test


def test_split_too_small():
    with pytest.raises(ValidationError):
        split_dataset(_cohort(2), (0.8, 0.1, 0.1), 1)


def test_split_bad_ratios():
    with pytest.raises(ValidationError):
        split_dataset(_cohort(10), (0.8, 0.3, 0.1), 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 200), st.integers(0, 10**6),
       st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10)).filter(lambda t: sum(t) > 0))
def test_split_soundness(n, seed, weights):
    ratios = tuple(w / sum(weights) for w in weights)
    cohort = _cohort(n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = split_dataset(cohort, ratios, seed)
    assert not (s.train & s.val) and not (s.train & s.test) and not (s.val & s.test)
    assert s.train | s.val | s.test == cohort.patient_ids
    assert abs(len(s.train) - ratios[0] * n) <= 1


# ---------------------------------------------------------------- samples


@pytest.mark.parametrize("code,expected", [("428.22", True), ("4280", True), ("428", True), ("428.0", True),
                                           ("V428", False), ("42.8", False), ("250.00", False)])
def test_heart_failure_prefix(code, expected):
    assert is_heart_failure_code(code) is expected


def _vocabs():
    return Vocabulary("diagnosis", ["250.00", "401.9", "428.22", "4280"]), Vocabulary("lab", ["a", "b"])


def test_hf_label_from_final_visit():
    dv, lv = _vocabs()
    for code in ("428.22", "4280"):
        p = PatientRecord("p", (Visit("1", 1, frozenset({"250.00"})), Visit("2", 2, frozenset({code}))))
        s = make_samples(p, "hf", dv, lv)
        assert s.label.tolist() == [True]
    p = PatientRecord("p", (Visit("1", 1, frozenset({"428.22"})), Visit("2", 2, frozenset({"401.9"}))))
    assert make_samples(p, "hf", dv, lv).label.tolist() == [False]


def test_dg_sample_history_and_label():
    dv, lv = _vocabs()
    visits = tuple(Visit(str(i), i, frozenset({dv.codes[i]}), frozenset({"a"} if i == 0 else ())) for i in range(4))
    s = make_samples(PatientRecord("p", visits), "dg", dv, lv)
    assert s.history_diag.shape == (3, 4)
    assert s.history_lab.shape == (3, 2)
    np.testing.assert_array_equal(s.label, [0, 0, 0, 1])
    np.testing.assert_array_equal(s.history_lab[:, 0], [1, 0, 0])


def test_sample_needs_two_visits():
    dv, lv = _vocabs()
    with pytest.raises(ValidationError):
        make_samples(PatientRecord("p", (Visit("1", 1, frozenset({"401.9"})),)), "dg", dv, lv)


def test_window_samples():
    dv, lv = _vocabs()
    visits = tuple(Visit(str(i), i, frozenset({dv.codes[i]})) for i in range(4))
    ws = make_window_samples(PatientRecord("p", visits), "dg", dv, lv)
    assert [w.length for w in ws] == [1, 2, 3]
    np.testing.assert_array_equal(ws[-1].label, make_samples(PatientRecord("p", visits), "dg", dv, lv).label)
