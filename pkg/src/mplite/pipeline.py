"""Glue from CSV tables to cohorts, splits and task samples."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .ehr import (Cohort, DatasetSplit, PatientRecord, TaskSample, Vocabulary, assemble_patients, build_vocabulary,
                  load_table, make_samples, make_window_samples, select_cohorts, split_dataset)
from .errors import ValidationError
from .pretrain import PretrainSample, build_pretrain_set

TABLES = ("admissions", "diagnoses", "labevents")


@dataclass
class Dataset:
    patients: dict[str, PatientRecord]
    diag_vocab: Vocabulary
    lab_vocab: Vocabulary
    pretrain_cohort: Cohort
    prediction_cohort: Cohort
    split: DatasetSplit
    counters: Counter = field(default_factory=Counter)

    def manifest(self) -> dict:
        """Counts mirroring the dataset statistics table."""
        ps = self.patients.values()
        single = [p for p in ps if p.T == 1]
        return {
            "patients_total": len(self.patients),
            "patients_multi": sum(1 for p in ps if p.T >= 2),
            "patients_multi_utilized": self.prediction_cohort.N,
            "patients_single": len(single),
            "patients_single_utilized": sum(1 for p in single if p.patient_id in self.pretrain_cohort),
            "avg_visits_per_patient": round(sum(p.T for p in ps) / max(1, len(self.patients)), 4),
            "n_diag_codes": self.diag_vocab.size,
            "n_lab_items": self.lab_vocab.size,
            "split_sizes": {"train": len(self.split.train), "val": len(self.split.val),
                            "test": len(self.split.test)},
            "split_seed": self.split.seed,
            "diag_fingerprint": self.diag_vocab.fingerprint(),
            "lab_fingerprint": self.lab_vocab.fingerprint(),
            "drop_counters": dict(sorted(self.counters.items())),
        }


def load_tables(data_dir):
    data_dir = Path(data_dir)
    return tuple(load_table(data_dir / f"{name}.csv", name) for name in TABLES)


def load_patients(data_dir) -> list[PatientRecord]:
    return assemble_patients(*load_tables(data_dir))


def build_dataset(data_dir, ratios: Sequence[float], split_seed: int,
                  diag_vocab: Vocabulary | None = None, lab_vocab: Vocabulary | None = None,
                  split: DatasetSplit | None = None) -> Dataset:
    """Load, assemble and partition a dataset.

    Vocabularies and the split are rebuilt from the data unless given (later
    pipeline stages pass the ones recorded at ingest time).
    """
    adm, dx, lab = load_tables(data_dir)
    patients = assemble_patients(adm, dx, lab)
    diag_vocab = diag_vocab or build_vocabulary(dx, "diagnosis")
    lab_vocab = lab_vocab or build_vocabulary(lab, "lab")
    pre, pred = select_cohorts(patients)
    if pred.N == 0:
        raise ValidationError(f"{data_dir}: no patient qualifies for prediction (need >= 2 coded visits)")
    if split is None:
        split = split_dataset(pred, ratios, split_seed)
    elif split.train | split.val | split.test != pred.patient_ids:
        raise ValidationError("recorded split does not cover the prediction cohort of this dataset")
    return Dataset({p.patient_id: p for p in patients}, diag_vocab, lab_vocab, pre, pred, split)


def task_samples(ds: Dataset, task: str, part: str, policy: str = "drop", sliding: bool = False) -> list[TaskSample]:
    ids = sorted(getattr(ds.split, part))
    out = []
    for pid in ids:
        p = ds.patients[pid]
        if sliding:
            out.extend(make_window_samples(p, task, ds.diag_vocab, ds.lab_vocab, policy, ds.counters))
        else:
            out.append(make_samples(p, task, ds.diag_vocab, ds.lab_vocab, policy, ds.counters))
    return out


def pretrain_samples(ds: Dataset, policy: str = "drop") -> list[PretrainSample]:
    patients = [ds.patients[k] for k in sorted(ds.patients)]
    return build_pretrain_set(patients, ds.pretrain_cohort, ds.split, ds.diag_vocab, ds.lab_vocab, policy,
                              ds.counters)
