"""Synthetic EHR generator with a planted lab -> diagnosis structure.

Generative process, per dataset:

* every diagnosis code ``d`` owns a disjoint, non-empty set of lab items
  ``S_d`` (all lab items are owned) and a prevalence ``pi_d``;
* a patient's latent active set at visit 1 draws each ``d`` with
  probability ``pi_d``; afterwards each active disease persists with
  probability ``rho`` and each inactive one starts with probability
  ``onset``;
* at every visit the coded diagnoses are the active diseases, each missed
  by the coder with probability ``miss``; trajectories with an uncoded
  visit are redrawn;
* lab item ``l`` in ``S_d`` is truly abnormal iff ``d`` is active, and the
  observed flag is flipped with probability ``eps``.

Because supports are disjoint, the posterior over visit-1 diagnoses given
the visit-1 labs factorises per code, which :func:`bayes_posterior` uses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .ehr import AdmissionEvent, DiagnosisEvent, LabEvent, PatientRecord, assemble_patients, write_table
from .errors import ValidationError
from .nn import make_rng

BASE_TIME = 4102444800  # 2100-01-01T00:00:00Z
DAY = 86400
MAX_REDRAWS = 10000


@dataclass
class SynthConfig:
    n_diag: int = 40
    n_lab: int = 50
    n_patients: int = 1000
    single_visit_fraction: float = 0.8
    min_visits: int = 2
    max_visits: int = 5
    prevalence_min: float = 0.02
    prevalence_max: float = 0.15
    n_hf_codes: int = 2
    hf_prevalence: float = 0.2
    eps: float = 0.1
    rho: float = 0.7
    onset: float = 0.01
    miss: float = 0.2
    normal_panel: int = 2
    no_lab_fraction: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        probs = ("single_visit_fraction", "prevalence_min", "prevalence_max", "hf_prevalence", "eps", "rho",
                 "onset", "miss", "no_lab_fraction")
        for name in probs:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ValidationError(f"synth.{name} must be a probability in [0, 1], got {v!r}")
        if self.prevalence_min > self.prevalence_max:
            raise ValidationError("synth.prevalence_min exceeds synth.prevalence_max")
        if self.miss >= 1.0:
            raise ValidationError("synth.miss must be < 1 or no visit can be coded")
        if self.n_diag < 1 or self.n_patients < 1:
            raise ValidationError("synth.n_diag and synth.n_patients must be positive")
        if self.n_lab < self.n_diag:
            raise ValidationError("synth.n_lab must be >= synth.n_diag (every code owns a lab item)")
        if not 0 <= self.n_hf_codes <= min(self.n_diag, 10):
            raise ValidationError("synth.n_hf_codes must be between 0 and min(n_diag, 10)")
        if not 2 <= self.min_visits <= self.max_visits:
            raise ValidationError("synth visits need 2 <= min_visits <= max_visits")
        if self.n_diag - self.n_hf_codes > 9980:
            raise ValidationError("synth.n_diag too large for the code space")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synth option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    """Planted parameters, keyed by code strings."""

    diag_codes: list[str]
    lab_codes: list[str]
    prevalence: dict[str, float]
    support: dict[str, list[str]]
    eps: float
    rho: float
    onset: float
    miss: float
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(**d)

    def owner_of(self) -> dict[str, str]:
        return {lab: d for d, labs in self.support.items() for lab in labs}


def plant_parameters(cfg: SynthConfig, rng: np.random.Generator, seed: int = 0) -> GroundTruth:
    hf = [f"428.{i}" for i in range(cfg.n_hf_codes)]
    n_other = cfg.n_diag - cfg.n_hf_codes
    space = [(n, k) for n in range(1, 1000) if n != 428 for k in range(10)]
    picks = rng.choice(len(space), size=n_other, replace=False)
    other = [f"{space[i][0]:03d}.{space[i][1]}" for i in sorted(picks)]
    diag = hf + other
    labs = [str(50800 + i) for i in range(cfg.n_lab)]

    order = rng.permutation(cfg.n_lab)
    owner = np.empty(cfg.n_lab, dtype=int)
    owner[order[: cfg.n_diag]] = np.arange(cfg.n_diag)
    owner[order[cfg.n_diag:]] = rng.integers(0, cfg.n_diag, size=cfg.n_lab - cfg.n_diag)
    support = {d: [] for d in diag}
    for j, lab in enumerate(labs):
        support[diag[owner[j]]].append(lab)

    prev = rng.uniform(cfg.prevalence_min, cfg.prevalence_max, size=cfg.n_diag)
    prev[: cfg.n_hf_codes] = cfg.hf_prevalence
    return GroundTruth(
        diag_codes=sorted(diag),
        lab_codes=labs,
        prevalence={d: float(p) for d, p in sorted(zip(diag, prev))},
        support={d: sorted(support[d]) for d in sorted(diag)},
        eps=cfg.eps, rho=cfg.rho, onset=cfg.onset, miss=cfg.miss,
        seed=seed, config=cfg.to_dict(),
    )


def _trajectory(truth_arrays, T: int, rng: np.random.Generator):
    prev, rho, onset, miss = truth_arrays
    D = prev.shape[0]
    for _ in range(MAX_REDRAWS):
        active = np.empty((T, D), dtype=bool)
        active[0] = rng.random(D) < prev
        for t in range(1, T):
            keep = rng.random(D) < rho
            start = rng.random(D) < onset
            active[t] = (active[t - 1] & keep) | (~active[t - 1] & start)
        coded = active & (rng.random((T, D)) >= miss)
        if coded.any(axis=1).all():
            return active, coded
    raise ValidationError("synthetic generator could not produce coded visits; raise prevalence or lower miss")


def sample_tables(truth: GroundTruth, cfg: SynthConfig, rng: np.random.Generator, id_prefix: str = "P"):
    """Draw patients from planted parameters; returns ``(admissions, diagnoses, labevents)``."""
    diag = truth.diag_codes
    labs = truth.lab_codes
    owner_code = truth.owner_of()
    d_index = {d: i for i, d in enumerate(diag)}
    owner = np.array([d_index[owner_code[lab]] for lab in labs])
    arrays = (np.array([truth.prevalence[d] for d in diag]), truth.rho, truth.onset, truth.miss)

    n = cfg.n_patients
    n_single = int(np.floor(cfg.single_visit_fraction * n + 0.5))
    counts = np.ones(n, dtype=int)
    counts[n_single:] = rng.integers(cfg.min_visits, cfg.max_visits + 1, size=n - n_single)
    counts = counts[rng.permutation(n)]
    n_nolab = int(np.floor(cfg.no_lab_fraction * n + 0.5))
    no_lab = np.zeros(n, dtype=bool)
    no_lab[rng.permutation(n)[:n_nolab]] = True

    admissions, diagnoses, labevents = [], [], []
    visit_no = 0
    width = max(6, len(str(n)))
    for i in range(n):
        pid = f"{id_prefix}{i:0{width}d}"
        T = int(counts[i])
        active, coded = _trajectory(arrays, T, rng)
        truth_labs = active[:, owner]
        flips = rng.random(truth_labs.shape) < truth.eps
        observed = truth_labs ^ flips
        t = BASE_TIME + int(rng.integers(0, 3 * 365 * DAY))
        prev_abn = np.zeros(len(labs), dtype=bool)
        for v in range(T):
            if v > 0:
                t += int(rng.integers(30, 400)) * DAY + int(rng.integers(0, DAY))
            vid = f"V{visit_no:08d}"
            visit_no += 1
            admissions.append(AdmissionEvent(pid, vid, t))
            for j in np.flatnonzero(coded[v]):
                diagnoses.append(DiagnosisEvent(pid, vid, diag[j]))
            if no_lab[i]:
                prev_abn = observed[v]
                continue
            abn = observed[v]
            resolved = prev_abn & ~abn
            candidates = np.flatnonzero(~abn & ~resolved)
            k = min(cfg.normal_panel, candidates.size)
            panel = np.zeros(len(labs), dtype=bool)
            if k:
                panel[rng.choice(candidates, size=k, replace=False)] = True
            tested = abn | resolved | panel
            for j in np.flatnonzero(tested):
                ts = t - int(rng.integers(60, 48 * 3600))
                labevents.append(LabEvent(pid, vid, labs[j], bool(abn[j]), ts))
            prev_abn = abn
    return admissions, diagnoses, labevents


def generate_tables(cfg: SynthConfig, seed: int):
    truth = plant_parameters(cfg, make_rng(seed, 0), seed)
    tables = sample_tables(truth, cfg, make_rng(seed, 1))
    return (*tables, truth)


def synth_generate(cfg: SynthConfig, seed: int) -> tuple[list[PatientRecord], GroundTruth]:
    adm, dx, lab, truth = generate_tables(cfg, seed)
    return assemble_patients(adm, dx, lab), truth


def write_synthetic(out_dir, cfg: SynthConfig, seed: int) -> dict:
    """Write the three CSV tables plus ``ground_truth.json``; returns a manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    adm, dx, lab, truth = generate_tables(cfg, seed)
    write_table(out / "admissions.csv", "admissions", adm)
    write_table(out / "diagnoses.csv", "diagnoses", dx)
    write_table(out / "labevents.csv", "labevents", lab)
    (out / "ground_truth.json").write_text(json.dumps(truth.to_dict(), indent=1, sort_keys=True) + "\n")
    n_single = int(np.floor(cfg.single_visit_fraction * cfg.n_patients + 0.5))
    return {
        "seed": seed,
        "config": cfg.to_dict(),
        "patients_total": cfg.n_patients,
        "patients_single": n_single,
        "patients_multi": cfg.n_patients - n_single,
        "n_diag_codes": cfg.n_diag,
        "n_lab_items": cfg.n_lab,
        "rows": {"admissions": len(adm), "diagnoses": len(dx), "labevents": len(lab)},
    }


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text()))


def bayes_posterior(truth: GroundTruth, abnormal_labs) -> dict[str, float]:
    """Exact ``P(code is recorded at visit 1 | visit-1 abnormal labs)``.

    Conditions on the visit having at least one coded diagnosis, as the
    generator does.  ``abnormal_labs`` is a set of lab item codes.
    """
    abnormal = set(abnormal_labs)
    eps = truth.eps
    q = {}
    for d in truth.diag_codes:
        on = off = 1.0
        for lab in truth.support[d]:
            if lab in abnormal:
                on *= 1.0 - eps
                off *= eps
            else:
                on *= eps
                off *= 1.0 - eps
        pi = truth.prevalence[d]
        num = pi * on
        den = num + (1.0 - pi) * off
        q[d] = (1.0 - truth.miss) * (num / den if den > 0 else pi)
    nonempty = 1.0 - float(np.prod([1.0 - v for v in q.values()]))
    if nonempty <= 0.0:
        return {d: 0.0 for d in q}
    return {d: v / nonempty for d, v in q.items()}
