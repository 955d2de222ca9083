"""EHR ingestion: CSV tables, vocabularies, patient assembly, cohorts, samples."""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestError, ValidationError
from .nn import make_rng

# statistics of the full MIMIC-III extraction; used by validate_vocab_size
MIMIC3_N_DIAG_CODES = 4880
MIMIC3_N_LAB_ITEMS = 697

HF_PREFIX = "428"

SCHEMAS = {
    "admissions": ("patient_id", "visit_id", "admit_time"),
    "diagnoses": ("patient_id", "visit_id", "icd_code"),
    "labevents": ("patient_id", "visit_id", "item_code", "abnormal", "timestamp"),
}


@dataclass(frozen=True)
class AdmissionEvent:
    patient_id: str
    visit_id: str
    admit_time: int
    row: int = field(default=0, compare=False)


@dataclass(frozen=True)
class DiagnosisEvent:
    patient_id: str
    visit_id: str
    icd_code: str
    row: int = field(default=0, compare=False)


@dataclass(frozen=True)
class LabEvent:
    patient_id: str
    visit_id: str
    item_code: str
    abnormal: bool
    timestamp: int
    row: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Visit:
    visit_id: str
    admit_time: int
    diag_codes: frozenset = frozenset()
    lab_abnormal: frozenset = frozenset()


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]
    n_lab_events: int = 0

    @property
    def T(self) -> int:
        return len(self.visits)


# --------------------------------------------------------------------------
# CSV tables
# --------------------------------------------------------------------------


def _parse_int(value: str, column: str, path, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise IngestError(f"{path}: row {line}: cannot parse {column}={value!r} as integer") from None


def load_table(path, schema: str) -> list:
    """Parse one of the three input tables into event objects.

    Rows are numbered as file lines, so the first data row is row 2.
    """
    if schema not in SCHEMAS:
        raise ValidationError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMAS)}")
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: file not found")
    columns = SCHEMAS[schema]
    events = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise IngestError(f"{path}: missing column(s) {', '.join(missing)}")
        for line, rec in enumerate(reader, start=2):
            vals = {}
            for c in columns:
                v = rec.get(c)
                v = v.strip() if v is not None else ""
                if not v:
                    raise IngestError(f"{path}: row {line}: empty {c}")
                vals[c] = v
            if schema == "admissions":
                ev = AdmissionEvent(vals["patient_id"], vals["visit_id"],
                                    _parse_int(vals["admit_time"], "admit_time", path, line), line)
            elif schema == "diagnoses":
                ev = DiagnosisEvent(vals["patient_id"], vals["visit_id"], vals["icd_code"], line)
            else:
                if vals["abnormal"] not in ("0", "1"):
                    raise IngestError(f"{path}: row {line}: abnormal must be 0 or 1, got {vals['abnormal']!r}")
                ev = LabEvent(vals["patient_id"], vals["visit_id"], vals["item_code"], vals["abnormal"] == "1",
                              _parse_int(vals["timestamp"], "timestamp", path, line), line)
            events.append(ev)
    return events


def write_table(path, schema: str, events: Iterable) -> None:
    columns = SCHEMAS[schema]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for ev in events:
            row = [getattr(ev, c) for c in columns]
            if schema == "labevents":
                row[3] = int(row[3])
            w.writerow(row)


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------


class Vocabulary:
    """Bidirectional code <-> index map; indices follow lexicographic code order."""

    def __init__(self, kind: str, codes: Iterable[str]):
        if kind not in ("diagnosis", "lab"):
            raise ValueError(f"vocabulary kind must be 'diagnosis' or 'lab', got {kind!r}")
        self.kind = kind
        self.codes = tuple(sorted(set(codes)))
        self.code_to_index = {c: i for i, c in enumerate(self.codes)}

    @property
    def size(self) -> int:
        return len(self.codes)

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code) -> bool:
        return code in self.code_to_index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and (self.kind, self.codes) == (other.kind, other.codes)

    def __repr__(self) -> str:
        return f"Vocabulary({self.kind!r}, size={self.size})"

    def index_to_code(self, i: int) -> str:
        return self.codes[i]

    def fingerprint(self) -> str:
        """Order-sensitive content hash; binds checkpoints to this exact indexing."""
        h = hashlib.sha256(self.kind.encode())
        for c in self.codes:
            h.update(b"\n" + c.encode())
        return h.hexdigest()

    def encode(self, codes: Iterable[str], policy: str = "drop", counter: Counter | None = None) -> np.ndarray:
        bits = np.zeros(self.size, dtype=bool)
        for c in codes:
            i = self.code_to_index.get(c)
            if i is None:
                if policy == "error":
                    raise ValidationError(f"{self.kind} code {c!r} not in vocabulary")
                if policy != "drop":
                    raise ValueError(f"unknown encode policy {policy!r}")
                if counter is not None:
                    counter[f"{self.kind}_dropped"] += 1
                continue
            bits[i] = True
        return bits

    def decode(self, bits) -> set[str]:
        return {self.codes[i] for i in np.flatnonzero(np.asarray(bits))}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "codes": list(self.codes)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["kind"], d["codes"])


def build_vocabulary(events: Iterable, kind: str) -> Vocabulary:
    """Vocabulary over the distinct codes in ``events`` (event objects or plain strings)."""
    attr = "icd_code" if kind == "diagnosis" else "item_code"
    return Vocabulary(kind, (e if isinstance(e, str) else getattr(e, attr) for e in events))


def validate_vocab_size(vocab: Vocabulary, expected: int | None, strict: bool = False) -> bool:
    """Compare against an expected size (e.g. the MIMIC-III counts); warn or raise on mismatch."""
    if expected is None or vocab.size == expected:
        return True
    msg = f"{vocab.kind} vocabulary has {vocab.size} codes, expected {expected}"
    if strict:
        raise ValidationError(msg)
    warnings.warn(msg, stacklevel=2)
    return False


# --------------------------------------------------------------------------
# Patients
# --------------------------------------------------------------------------


def assemble_patients(admissions: Sequence[AdmissionEvent], diagnoses: Sequence[DiagnosisEvent],
                      labevents: Sequence[LabEvent]) -> list[PatientRecord]:
    """Group events into chronologically ordered patient records.

    Each visit's ``lab_abnormal`` holds the items whose latest result at or
    before the visit's admit time was abnormal.  Equal timestamps on one item
    resolve to abnormal.  Patients are returned sorted by id.
    """
    visit_owner: dict[str, str] = {}
    admit: dict[str, int] = {}
    for a in admissions:
        if a.visit_id in visit_owner:
            raise IngestError(f"admissions row {a.row}: duplicate visit_id {a.visit_id!r}")
        visit_owner[a.visit_id] = a.patient_id
        admit[a.visit_id] = a.admit_time

    diag: dict[str, set] = defaultdict(set)
    for d in diagnoses:
        owner = visit_owner.get(d.visit_id)
        if owner is None:
            raise IngestError(f"diagnoses row {d.row}: unknown visit_id {d.visit_id!r}")
        if owner != d.patient_id:
            raise IngestError(f"diagnoses row {d.row}: visit {d.visit_id!r} belongs to patient {owner!r}, "
                              f"not {d.patient_id!r}")
        diag[d.visit_id].add(d.icd_code)

    labs: dict[str, list] = defaultdict(list)
    for ev in labevents:
        owner = visit_owner.get(ev.visit_id)
        if owner is None:
            raise IngestError(f"labevents row {ev.row}: unknown visit_id {ev.visit_id!r}")
        if owner != ev.patient_id:
            raise IngestError(f"labevents row {ev.row}: visit {ev.visit_id!r} belongs to patient {owner!r}, "
                              f"not {ev.patient_id!r}")
        labs[ev.patient_id].append(ev)

    by_patient: dict[str, list] = defaultdict(list)
    for vid, pid in visit_owner.items():
        by_patient[pid].append(vid)

    patients = []
    for pid in sorted(by_patient):
        vids = sorted(by_patient[pid], key=lambda v: (admit[v], v))
        events = sorted(labs.get(pid, ()), key=lambda e: (e.timestamp, e.abnormal, e.item_code))
        state: dict[str, bool] = {}
        k = 0
        visits = []
        for vid in vids:
            t = admit[vid]
            while k < len(events) and events[k].timestamp <= t:
                state[events[k].item_code] = events[k].abnormal
                k += 1
            abnormal = frozenset(item for item, flag in state.items() if flag)
            visits.append(Visit(vid, t, frozenset(diag.get(vid, ())), abnormal))
        patients.append(PatientRecord(pid, tuple(visits), len(events)))
    return patients


def encode_visit(visit: Visit, diag_vocab: Vocabulary, lab_vocab: Vocabulary, policy: str = "drop",
                 counter: Counter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Multi-hot ``(x_diag, x_lab)`` for one visit."""
    return (diag_vocab.encode(visit.diag_codes, policy, counter),
            lab_vocab.encode(visit.lab_abnormal, policy, counter))


# --------------------------------------------------------------------------
# Cohorts and splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Cohort:
    kind: str
    patient_ids: frozenset

    @property
    def N(self) -> int:
        return len(self.patient_ids)

    def __contains__(self, pid) -> bool:
        return pid in self.patient_ids


def select_cohorts(patients: Iterable[PatientRecord]) -> tuple[Cohort, Cohort]:
    """Return ``(pretrain, prediction)`` cohorts.

    Prediction needs two or more visits, none of them without diagnoses.
    Pretraining needs at least one lab event, whatever the visit count.
    """
    pre, pred = set(), set()
    for p in patients:
        if p.n_lab_events > 0:
            pre.add(p.patient_id)
        if p.T >= 2 and all(v.diag_codes for v in p.visits):
            pred.add(p.patient_id)
    return Cohort("pretrain", frozenset(pre)), Cohort("prediction", frozenset(pred))


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset
    val: frozenset
    test: frozenset
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": sorted(self.train), "val": sorted(self.val),
                "test": sorted(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(frozenset(d["train"]), frozenset(d["val"]), frozenset(d["test"]), int(d["seed"]))


def split_dataset(cohort: Cohort, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Random patient-level train/val/test split, reproducible for a given seed."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = cohort.N
    if n < 3:
        raise ValidationError(f"cannot split a cohort of {n} patients (need at least 3)")
    ids = sorted(cohort.patient_ids)
    order = make_rng(seed).permutation(n)
    n_train = min(n, math.floor(ratios[0] * n + 0.5))
    n_val = min(n - n_train, math.floor(ratios[1] * n + 0.5))
    shuffled = [ids[i] for i in order]
    train = frozenset(shuffled[:n_train])
    val = frozenset(shuffled[n_train:n_train + n_val])
    test = frozenset(shuffled[n_train + n_val:])
    for name, part in (("train", train), ("validation", val), ("test", test)):
        if not part:
            warnings.warn(f"{name} split is empty", stacklevel=2)
    return DatasetSplit(train, val, test, seed)


# --------------------------------------------------------------------------
# Task samples
# --------------------------------------------------------------------------


def is_heart_failure_code(code: str) -> bool:
    """True when the part of ``code`` before any dot starts with ``428``."""
    return code.strip().split(".", 1)[0].startswith(HF_PREFIX)


@dataclass(frozen=True)
class TaskSample:
    patient_id: str
    task: str
    history_diag: np.ndarray  # (T-1, |D|) bool
    history_lab: np.ndarray  # (T-1, |L|) bool
    label: np.ndarray  # (|D|,) bool for DG, (1,) for HF

    @property
    def length(self) -> int:
        return self.history_diag.shape[0]


def _label(visit: Visit, task: str, diag_vocab: Vocabulary, policy: str, counter) -> np.ndarray:
    if task == "dg":
        return diag_vocab.encode(visit.diag_codes, policy, counter)
    if task == "hf":
        return np.array([any(is_heart_failure_code(c) for c in visit.diag_codes)])
    raise ValidationError(f"unknown task {task!r}; expected 'dg' or 'hf'")


def make_samples(patient: PatientRecord, task: str, diag_vocab: Vocabulary, lab_vocab: Vocabulary,
                 policy: str = "drop", counter: Counter | None = None) -> TaskSample:
    """One sample per patient: visits 1..T-1 as history, visit T as the label."""
    task = task.lower()
    if patient.T < 2:
        raise ValidationError(f"patient {patient.patient_id!r} has {patient.T} visit(s); need at least 2")
    enc = [encode_visit(v, diag_vocab, lab_vocab, policy, counter) for v in patient.visits[:-1]]
    label = _label(patient.visits[-1], task, diag_vocab, policy, counter)
    return TaskSample(patient.patient_id, task, np.stack([e[0] for e in enc]), np.stack([e[1] for e in enc]), label)


def make_window_samples(patient: PatientRecord, task: str, diag_vocab: Vocabulary, lab_vocab: Vocabulary,
                        policy: str = "drop", counter: Counter | None = None) -> list[TaskSample]:
    """Sliding-window extension: one sample per prefix ending before visit t, t = 2..T."""
    task = task.lower()
    if patient.T < 2:
        raise ValidationError(f"patient {patient.patient_id!r} has {patient.T} visit(s); need at least 2")
    enc = [encode_visit(v, diag_vocab, lab_vocab, policy, counter) for v in patient.visits]
    out = []
    for t in range(1, patient.T):
        label = _label(patient.visits[t], task, diag_vocab, policy, counter)
        out.append(TaskSample(patient.patient_id, task, np.stack([e[0] for e in enc[:t]]),
                              np.stack([e[1] for e in enc[:t]]), label))
    return out
