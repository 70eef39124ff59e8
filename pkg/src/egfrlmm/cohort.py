"""Longitudinal cohort ingestion, exclusion rules, and prediction windows."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from egfrlmm.errors import (
    ConfigError,
    DuplicateVisitError,
    EmptyCohortError,
    ParseError,
    SplitError,
    ValidationError,
)

logger = logging.getLogger(__name__)

# Longest allowed gap between consecutive visits, in days. 366 keeps leap years inside "one year".
MAX_GAP_DAYS = 366
MIN_VISITS = 5
DEFAULT_INITIAL_WIDTH = 3

GENDERS = ("female", "male")
SMOKING = ("never", "former", "current", "unknown")
DRINKING = ("never", "occasional", "regular", "unknown")

# (column name, display name); order is the encoding order used everywhere downstream.
COMORBIDITIES: tuple[tuple[str, str], ...] = (
    ("diabetes_mellitus", "Diabetes Mellitus"),
    ("hypertension", "Hypertension"),
    ("hyperlipidemia", "Hyperlipidemia"),
    ("coronary_artery_disease", "Coronary Artery Disease"),
    ("cardiovascular_disease", "Cardiovascular Disease"),
    ("atrial_fibrillation", "Atrial Fibrillation"),
    ("peripheral_artery_disease", "Peripheral Artery Disease"),
    ("dementia", "Dementia"),
    ("hepatitis_b_virus", "Hepatitis B Virus"),
    ("hepatitis_c_virus", "Hepatitis C Virus"),
    ("liver_cirrhosis", "Liver Cirrhosis"),
    ("peptic_ulcer", "Peptic Ulcer"),
    ("malignancy", "Malignancy"),
    ("gouty_nephropathy", "Gouty Nephropathy"),
    ("copd", "Chronic Obstructive Pulmonary Disease"),
    ("asthma", "Asthma"),
)

MEDICATIONS: tuple[tuple[str, str], ...] = (
    ("antiplatelets", "Antiplatelets"),
    ("anticoagulants", "Anticoagulants"),
    ("acei_arb", "ACE Inhibitors or ARBs"),
    ("calcium_channel_blockers", "Calcium Channel Blockers"),
    ("beta_blockers", "Beta-Blockers"),
    ("alpha_blockers", "Alpha-Blockers"),
    ("statins", "Statins"),
    ("fibrates", "Fibrates"),
    ("metformin", "Metformin"),
    ("dpp4_inhibitors", "DPP4 Inhibitors"),
    ("thiazolidinediones", "Thiazolidinediones"),
    ("sulfonylureas", "Sulfonylureas"),
    ("alpha_glucosidase_inhibitors", "Alpha-Glucosidase Inhibitors"),
    ("insulin", "Insulin"),
    ("proton_pump_inhibitors", "Proton Pump Inhibitors"),
    ("h2_blockers", "H2 Blockers"),
    ("thiazide_diuretics", "Thiazide Diuretics"),
    ("loop_diuretics", "Loop Diuretics"),
    ("potassium_sparing_agents", "Potassium-Sparing Agents"),
    ("colchicine", "Colchicine"),
    ("uric_acid_lowering_agents", "Uric Acid Lowering Agents"),
    ("nsaids", "NSAIDs"),
    ("traditional_nsaids", "Traditional NSAIDs"),
    ("cox2_inhibitors", "COX2 Inhibitors"),
)

COMORBIDITY_NAMES = dict(COMORBIDITIES)
MEDICATION_NAMES = dict(MEDICATIONS)

VISIT_COLUMNS = ("patient_id", "date", "egfr", "bun", "phosphorus", "uacr", "in_hospitalization")
PROFILE_COLUMNS = (
    "patient_id",
    "gender",
    "age_at_baseline",
    "ckd_cause",
    "smoking",
    "drinking_frequency",
    "ckd_stage",
    "charlson_index",
    *(name for name, _ in COMORBIDITIES),
    *(name for name, _ in MEDICATIONS),
)


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    date: date
    egfr: float
    bun: float | None = None
    phosphorus: float | None = None
    uacr: float | None = None
    in_hospitalization: bool = False

    def __post_init__(self):
        if not (self.egfr > 0 and math.isfinite(self.egfr)):
            raise ValidationError(f"egfr must be positive, got {self.egfr!r}")
        for name in ("bun", "phosphorus", "uacr"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ValidationError(f"{name} must be non-negative, got {value!r}")

    @property
    def visit_id(self) -> str:
        return f"{self.patient_id}@{self.date.isoformat()}"


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    gender: str
    age_at_baseline: float
    ckd_cause: str
    smoking: str
    drinking_frequency: str
    ckd_stage: int
    charlson_index: int = 0
    comorbidities: frozenset[str] = frozenset()
    medications: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValidationError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if self.smoking not in SMOKING:
            raise ValidationError(f"smoking must be one of {SMOKING}, got {self.smoking!r}")
        if self.drinking_frequency not in DRINKING:
            raise ValidationError(
                f"drinking_frequency must be one of {DRINKING}, got {self.drinking_frequency!r}"
            )
        if self.ckd_stage not in (1, 2, 3, 4, 5):
            raise ValidationError(f"ckd_stage must be 1-5, got {self.ckd_stage!r}")
        if self.charlson_index < 0:
            raise ValidationError(f"charlson_index must be >= 0, got {self.charlson_index!r}")
        unknown = set(self.comorbidities) - COMORBIDITY_NAMES.keys()
        if unknown:
            raise ValidationError(f"unknown comorbidity flags: {sorted(unknown)}")
        unknown = set(self.medications) - MEDICATION_NAMES.keys()
        if unknown:
            raise ValidationError(f"unknown medication flags: {sorted(unknown)}")


@dataclass(frozen=True)
class Cohort:
    """Profiles plus per-patient visit lists sorted by date.

    Treat instances as immutable; every transformation returns a new cohort.
    """

    profiles: Mapping[str, PatientProfile]
    visits: Mapping[str, tuple[VisitRecord, ...]]

    @property
    def patient_ids(self) -> list[str]:
        return sorted(self.profiles)

    @property
    def patient_count(self) -> int:
        return len(self.profiles)

    @property
    def median_visit_count(self) -> int:
        """Lower median of per-patient visit counts."""
        counts = sorted(len(self.visits.get(pid, ())) for pid in self.profiles)
        if not counts:
            raise EmptyCohortError("cohort has no patients")
        return counts[(len(counts) - 1) // 2]

    def to_dict(self) -> dict:
        return {
            "profiles": [_profile_to_dict(self.profiles[pid]) for pid in self.patient_ids],
            "visits": [
                _visit_to_dict(v) for pid in self.patient_ids for v in self.visits.get(pid, ())
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Cohort":
        profiles = {p["patient_id"]: _profile_from_dict(p) for p in data["profiles"]}
        visits: dict[str, list[VisitRecord]] = {pid: [] for pid in profiles}
        for row in data["visits"]:
            v = _visit_from_dict(row)
            visits[v.patient_id].append(v)
        return cls(profiles, {pid: tuple(vs) for pid, vs in visits.items()})

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class PredictionWindow:
    patient_id: str
    window_index: int
    observed_visits: tuple[VisitRecord, ...]
    target_visit: VisitRecord
    next_day_diff: int = field(init=False)

    def __post_init__(self):
        if self.window_index < 1:
            raise ValidationError("window_index must be >= 1")
        if not self.observed_visits:
            raise ValidationError("a window needs at least one observed visit")
        gap = (self.target_visit.date - self.observed_visits[-1].date).days
        if gap <= 0:
            raise ValidationError("target visit must come after the last observed visit")
        object.__setattr__(self, "next_day_diff", gap)

    @property
    def window_id(self) -> str:
        return f"{self.patient_id}#{self.window_index}"

    @property
    def last_observed(self) -> VisitRecord:
        return self.observed_visits[-1]

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "window_index": self.window_index,
            "observed_visits": [_visit_to_dict(v) for v in self.observed_visits],
            "target_visit": _visit_to_dict(self.target_visit),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PredictionWindow":
        return cls(
            patient_id=data["patient_id"],
            window_index=data["window_index"],
            observed_visits=tuple(_visit_from_dict(v) for v in data["observed_visits"]),
            target_visit=_visit_from_dict(data["target_visit"]),
        )


@dataclass(frozen=True)
class AuditRow:
    entity: str  # "visit" or "patient"
    id: str
    reason: str


def _visit_to_dict(v: VisitRecord) -> dict:
    return {
        "patient_id": v.patient_id,
        "date": v.date.isoformat(),
        "egfr": v.egfr,
        "bun": v.bun,
        "phosphorus": v.phosphorus,
        "uacr": v.uacr,
        "in_hospitalization": v.in_hospitalization,
    }


def _visit_from_dict(row: Mapping) -> VisitRecord:
    return VisitRecord(
        patient_id=row["patient_id"],
        date=date.fromisoformat(row["date"]),
        egfr=row["egfr"],
        bun=row["bun"],
        phosphorus=row["phosphorus"],
        uacr=row["uacr"],
        in_hospitalization=row["in_hospitalization"],
    )


def _profile_to_dict(p: PatientProfile) -> dict:
    return {
        "patient_id": p.patient_id,
        "gender": p.gender,
        "age_at_baseline": p.age_at_baseline,
        "ckd_cause": p.ckd_cause,
        "smoking": p.smoking,
        "drinking_frequency": p.drinking_frequency,
        "ckd_stage": p.ckd_stage,
        "charlson_index": p.charlson_index,
        "comorbidities": sorted(p.comorbidities),
        "medications": sorted(p.medications),
    }


def _profile_from_dict(d: Mapping) -> PatientProfile:
    return PatientProfile(
        patient_id=d["patient_id"],
        gender=d["gender"],
        age_at_baseline=d["age_at_baseline"],
        ckd_cause=d["ckd_cause"],
        smoking=d["smoking"],
        drinking_frequency=d["drinking_frequency"],
        ckd_stage=d["ckd_stage"],
        charlson_index=d["charlson_index"],
        comorbidities=frozenset(d["comorbidities"]),
        medications=frozenset(d["medications"]),
    )


# ---------------------------------------------------------------------------
# Ingestion


def _parse_float(raw: str | None, row: int, name: str, *, optional: bool) -> float | None:
    text = (raw or "").strip()
    if not text:
        if optional:
            return None
        raise ParseError("value is required", row, name)
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row, name) from None
    if not math.isfinite(value):
        raise ParseError(f"not a finite number: {text!r}", row, name)
    return value


def _parse_int(raw: str | None, row: int, name: str) -> int:
    value = _parse_float(raw, row, name, optional=False)
    if value != int(value):
        raise ParseError(f"not an integer: {raw!r}", row, name)
    return int(value)


def _parse_bool(raw: str | None, row: int, name: str) -> bool:
    text = (raw or "").strip().lower()
    if text in ("", "0", "false", "no", "n"):
        return False
    if text in ("1", "true", "yes", "y"):
        return True
    raise ParseError(f"not a boolean flag: {raw!r}", row, name)


def parse_visit_row(row: Mapping[str, str], row_number: int) -> VisitRecord:
    pid = (row.get("patient_id") or "").strip()
    if not pid:
        raise ParseError("patient_id is required", row_number, "patient_id")
    try:
        visit_date = date.fromisoformat((row.get("date") or "").strip())
    except ValueError:
        raise ParseError(f"not an ISO-8601 date: {row.get('date')!r}", row_number, "date") from None
    egfr = _parse_float(row.get("egfr"), row_number, "egfr", optional=False)
    if egfr <= 0:
        raise ParseError(f"egfr must be positive, got {egfr}", row_number, "egfr")
    labs = {}
    for name in ("bun", "phosphorus", "uacr"):
        value = _parse_float(row.get(name), row_number, name, optional=True)
        if value is not None and value < 0:
            raise ParseError(f"{name} must be non-negative, got {value}", row_number, name)
        labs[name] = value
    return VisitRecord(
        patient_id=pid,
        date=visit_date,
        egfr=egfr,
        in_hospitalization=_parse_bool(row.get("in_hospitalization"), row_number, "in_hospitalization"),
        **labs,
    )


def parse_profile_row(row: Mapping[str, str], row_number: int) -> PatientProfile:
    pid = (row.get("patient_id") or "").strip()
    if not pid:
        raise ParseError("patient_id is required", row_number, "patient_id")
    comorbidities = frozenset(
        name for name, _ in COMORBIDITIES if _parse_bool(row.get(name), row_number, name)
    )
    medications = frozenset(
        name for name, _ in MEDICATIONS if _parse_bool(row.get(name), row_number, name)
    )
    fields = {
        "gender": (row.get("gender") or "").strip().lower(),
        "smoking": (row.get("smoking") or "unknown").strip().lower() or "unknown",
        "drinking_frequency": (row.get("drinking_frequency") or "unknown").strip().lower()
        or "unknown",
    }
    choices = {"gender": GENDERS, "smoking": SMOKING, "drinking_frequency": DRINKING}
    for name, value in fields.items():
        if value not in choices[name]:
            raise ParseError(f"expected one of {choices[name]}, got {value!r}", row_number, name)
    stage = _parse_int(row.get("ckd_stage"), row_number, "ckd_stage")
    if stage not in (1, 2, 3, 4, 5):
        raise ParseError(f"ckd_stage must be 1-5, got {stage}", row_number, "ckd_stage")
    charlson = _parse_int(row.get("charlson_index") or "0", row_number, "charlson_index")
    if charlson < 0:
        raise ParseError("charlson_index must be >= 0", row_number, "charlson_index")
    return PatientProfile(
        patient_id=pid,
        age_at_baseline=_parse_float(row.get("age_at_baseline"), row_number, "age_at_baseline", optional=False),
        ckd_cause=(row.get("ckd_cause") or "").strip() or "unknown",
        ckd_stage=stage,
        charlson_index=charlson,
        comorbidities=comorbidities,
        medications=medications,
        **fields,
    )


def ingest_cohort(
    visit_rows: Iterable[Mapping[str, str]],
    profile_rows: Iterable[Mapping[str, str]],
) -> Cohort:
    """Build a raw cohort from visit and profile records.

    Row numbers in errors count a header line as row 1, so the first record is row 2.
    Visits are sorted by date per patient. Duplicate (patient, date) pairs and visits
    for patients without a profile are rejected.
    """
    profiles: dict[str, PatientProfile] = {}
    for n, row in enumerate(profile_rows, start=2):
        profile = parse_profile_row(row, n)
        if profile.patient_id in profiles:
            raise DuplicateVisitError(f"row {n}: duplicate profile for {profile.patient_id!r}")
        profiles[profile.patient_id] = profile

    seen: dict[tuple[str, date], int] = {}
    visits: dict[str, list[VisitRecord]] = {pid: [] for pid in profiles}
    for n, row in enumerate(visit_rows, start=2):
        visit = parse_visit_row(row, n)
        key = (visit.patient_id, visit.date)
        if key in seen:
            raise DuplicateVisitError(
                f"row {n}: duplicate visit for patient {visit.patient_id!r} on "
                f"{visit.date.isoformat()} (first seen at row {seen[key]})"
            )
        seen[key] = n
        if visit.patient_id not in profiles:
            raise ParseError(f"no profile for patient {visit.patient_id!r}", n, "patient_id")
        visits[visit.patient_id].append(visit)

    return Cohort(
        profiles=profiles,
        visits={pid: tuple(sorted(vs, key=lambda v: v.date)) for pid, vs in visits.items()},
    )


def load_cohort(visits_path: str | Path, profiles_path: str | Path) -> Cohort:
    with open(visits_path, newline="", encoding="utf-8") as fv, open(
        profiles_path, newline="", encoding="utf-8"
    ) as fp:
        return ingest_cohort(csv.DictReader(fv), csv.DictReader(fp))


def write_cohort_csv(cohort: Cohort, visits_path: str | Path, profiles_path: str | Path) -> None:
    """Write a cohort in the same two-file layout ``load_cohort`` reads."""

    def fmt(x):
        return "" if x is None else repr(float(x))

    with open(visits_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(VISIT_COLUMNS)
        for pid in cohort.patient_ids:
            for v in cohort.visits.get(pid, ()):
                writer.writerow(
                    [pid, v.date.isoformat(), fmt(v.egfr), fmt(v.bun), fmt(v.phosphorus),
                     fmt(v.uacr), int(v.in_hospitalization)]
                )
    with open(profiles_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(PROFILE_COLUMNS)
        for pid in cohort.patient_ids:
            p = cohort.profiles[pid]
            writer.writerow(
                [pid, p.gender, repr(float(p.age_at_baseline)), p.ckd_cause, p.smoking,
                 p.drinking_frequency, p.ckd_stage, p.charlson_index]
                + [int(name in p.comorbidities) for name, _ in COMORBIDITIES]
                + [int(name in p.medications) for name, _ in MEDICATIONS]
            )


# ---------------------------------------------------------------------------
# Exclusion rules


def _longest_run(visits: tuple[VisitRecord, ...]) -> tuple[int, int]:
    """Half-open index range of the longest run with every gap <= MAX_GAP_DAYS.

    Ties go to the earliest run.
    """
    best = (0, 0)
    start = 0
    for i in range(1, len(visits) + 1):
        if i == len(visits) or (visits[i].date - visits[i - 1].date).days > MAX_GAP_DAYS:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = i
    return best


def preprocess(cohort: Cohort) -> tuple[Cohort, list[AuditRow]]:
    """Apply the exclusion rules in order and return the surviving cohort plus an audit.

    1. visits flagged as inside a hospitalization are dropped;
    2. a patient whose remaining visits contain a gap over 366 days keeps only the
       longest run without such a gap (earliest run on ties);
    3. patients left with fewer than five visits are dropped.
    """
    audit: list[AuditRow] = []
    profiles: dict[str, PatientProfile] = {}
    visits: dict[str, tuple[VisitRecord, ...]] = {}
    for pid in cohort.patient_ids:
        kept = []
        for v in cohort.visits.get(pid, ()):
            if v.in_hospitalization:
                audit.append(AuditRow("visit", v.visit_id, "hospitalization"))
            else:
                kept.append(v)
        kept_t = tuple(kept)
        lo, hi = _longest_run(kept_t)
        for v in kept_t[:lo] + kept_t[hi:]:
            audit.append(AuditRow("visit", v.visit_id, "gap-split"))
        kept_t = kept_t[lo:hi]
        if len(kept_t) < MIN_VISITS:
            audit.append(AuditRow("patient", pid, "fewer-than-five"))
            continue
        profiles[pid] = cohort.profiles[pid]
        visits[pid] = kept_t
    if not profiles:
        raise EmptyCohortError("no patients survive preprocessing")
    logger.info(
        "preprocess kept %d of %d patients (%d audit rows)",
        len(profiles), cohort.patient_count, len(audit),
    )
    return Cohort(profiles, visits), audit


def write_audit(rows: Iterable[AuditRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["entity", "id", "reason"])
        for r in rows:
            writer.writerow([r.entity, r.id, r.reason])


def read_audit(path: str | Path) -> list[AuditRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [AuditRow(r["entity"], r["id"], r["reason"]) for r in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# Windows and splits


def window_count(n_visits: int, median_visits: int, initial_width: int) -> int:
    return max(0, min(median_visits, n_visits - initial_width))


def generate_windows(cohort: Cohort, initial_width: int = DEFAULT_INITIAL_WIDTH) -> list[PredictionWindow]:
    """Emit prefix windows per patient.

    Window ``m`` observes the first ``initial_width + m - 1`` visits and targets the
    next one; a patient yields ``min(M, n_p - initial_width)`` windows where ``M`` is the
    cohort's median visit count.
    """
    if initial_width < 2:
        raise ConfigError(f"initial window width must be >= 2, got {initial_width}")
    median = cohort.median_visit_count
    windows = []
    for pid in cohort.patient_ids:
        vs = cohort.visits.get(pid, ())
        for m in range(1, window_count(len(vs), median, initial_width) + 1):
            width = initial_width + m - 1
            windows.append(
                PredictionWindow(
                    patient_id=pid,
                    window_index=m,
                    observed_visits=vs[:width],
                    target_visit=vs[width],
                )
            )
    return windows


def split_patients(cohort: Cohort, train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Patient-level train/validation split, deterministic for a given seed."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = cohort.patient_ids
    if len(ids) < 2:
        raise SplitError(f"need at least 2 patients to split, got {len(ids)}")
    n_train = round(train_fraction * len(ids))
    n_train = min(max(n_train, 1), len(ids) - 1)
    shuffled = list(ids)
    random.Random(seed).shuffle(shuffled)
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])
