"""Seeded synthetic cohorts that stand in for protected patient data."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from datetime import date, timedelta

import numpy as np

from egfrlmm.cohort import (
    COMORBIDITIES,
    DRINKING,
    MEDICATIONS,
    SMOKING,
    Cohort,
    PatientProfile,
    VisitRecord,
)
from egfrlmm.errors import ConfigError

FAMILIES = ("linear", "piecewise", "noisy")

CKD_CAUSES = (
    "diabetic nephropathy",
    "hypertensive nephrosclerosis",
    "chronic glomerulonephritis",
    "polycystic kidney disease",
    "unknown",
)

# Rough prevalence for the common comorbidities; the rest use the default rate.
_COMORBIDITY_RATES = {"diabetes_mellitus": 0.45, "hypertension": 0.7, "hyperlipidemia": 0.4}


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 50
    visits_min: int = 8
    visits_max: int = 14
    family: str = "noisy"
    # eGFR change per 90 days, drawn uniformly per patient from this range.
    slope_per_90d: tuple[float, float] = (-3.0, 0.5)
    noise_sd: float = 2.0
    baseline_range: tuple[float, float] = (2.44, 171.85)
    floor: float = 2.0
    interval_days: int = 90
    interval_jitter: int = 14
    lab_missing_rate: float = 0.1
    hospitalization_rate: float = 0.0
    start_date: date = date(2015, 1, 1)
    start_spread_days: int = 730
    comorbidity_rate: float = 0.15
    medication_rate: float = 0.2

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 1 <= self.visits_min <= self.visits_max:
            raise ConfigError("need 1 <= visits_min <= visits_max")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        lo, hi = self.baseline_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad baseline_range {self.baseline_range}")
        if self.slope_per_90d[0] > self.slope_per_90d[1]:
            raise ConfigError("slope_per_90d must be (low, high)")
        if self.interval_days < 1 or self.interval_jitter < 0 or self.interval_jitter >= self.interval_days:
            raise ConfigError("need interval_days >= 1 and 0 <= interval_jitter < interval_days")
        if self.floor <= 0:
            raise ConfigError("floor must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic cohort keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("slope_per_90d", "baseline_range"):
            if key in kwargs:
                kwargs[key] = tuple(float(x) for x in kwargs[key])
        if "start_date" in kwargs and isinstance(kwargs["start_date"], str):
            kwargs["start_date"] = date.fromisoformat(kwargs["start_date"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_date"] = self.start_date.isoformat()
        d["slope_per_90d"] = list(self.slope_per_90d)
        d["baseline_range"] = list(self.baseline_range)
        return d


def _stage_for(egfr: float) -> int:
    if egfr >= 90:
        return 1
    if egfr >= 60:
        return 2
    if egfr >= 30:
        return 3
    if egfr >= 15:
        return 4
    return 5


def _trajectory_offsets(spec: SyntheticSpec, days: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    slope = rng.uniform(*spec.slope_per_90d) / 90.0
    if spec.family == "piecewise":
        slope2 = rng.uniform(*spec.slope_per_90d) / 90.0
        bp = days[len(days) // 2]
        return np.where(days <= bp, slope * days, slope * bp + slope2 * (days - bp))
    return slope * days


def _labs(egfr: float, rng: np.random.Generator, missing_rate: float):
    # Loosely inverse relations to kidney function; enough for plausible covariates.
    bun = 8.0 + 900.0 / egfr * rng.uniform(0.8, 1.2)
    phosphorus = 3.0 + 25.0 / egfr * rng.uniform(0.8, 1.2)
    uacr = float(np.exp(rng.normal(3.0 + 60.0 / egfr, 0.6)))
    out = []
    for value in (bun, phosphorus, uacr):
        out.append(None if rng.random() < missing_rate else round(float(value), 1))
    return out


def generate_synthetic_cohort(spec: SyntheticSpec, seed: int) -> Cohort:
    """Generate a deterministic cohort for ``spec``.

    Trajectories are built as offsets from a baseline value; the baseline is drawn so
    that the whole trajectory stays above ``spec.floor`` while the first visit remains
    inside ``spec.baseline_range``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = spec.baseline_range
    width = len(str(spec.n_patients))
    profiles: dict[str, PatientProfile] = {}
    visits: dict[str, tuple[VisitRecord, ...]] = {}

    for i in range(spec.n_patients):
        pid = f"P{i + 1:0{max(width, 3)}d}"
        n = int(rng.integers(spec.visits_min, spec.visits_max + 1))
        gaps = rng.integers(
            spec.interval_days - spec.interval_jitter,
            spec.interval_days + spec.interval_jitter + 1,
            size=max(n - 1, 0),
        )
        days = np.concatenate([[0], np.cumsum(gaps)]).astype(float)
        offsets = _trajectory_offsets(spec, days, rng)
        if spec.family == "noisy":
            offsets[1:] += rng.normal(0.0, spec.noise_sd, size=n - 1)

        lowest = float(offsets.min())
        if spec.floor - lowest > hi:
            # Decline too steep for the allowed baseline range: compress it.
            offsets *= (hi - spec.floor) / -lowest
            lowest = float(offsets.min())
        baseline = float(rng.uniform(max(lo, spec.floor - lowest), hi))
        egfrs = baseline + offsets

        start = spec.start_date + timedelta(days=int(rng.integers(0, spec.start_spread_days + 1)))
        records = []
        for d, e in zip(days, egfrs):
            bun, phos, uacr = _labs(float(e), rng, spec.lab_missing_rate)
            records.append(
                VisitRecord(
                    patient_id=pid,
                    date=start + timedelta(days=int(d)),
                    egfr=float(e),
                    bun=bun,
                    phosphorus=phos,
                    uacr=uacr,
                    in_hospitalization=bool(rng.random() < spec.hospitalization_rate),
                )
            )
        visits[pid] = tuple(records)

        comorbidities = frozenset(
            name
            for name, _ in COMORBIDITIES
            if rng.random() < _COMORBIDITY_RATES.get(name, spec.comorbidity_rate)
        )
        medications = frozenset(name for name, _ in MEDICATIONS if rng.random() < spec.medication_rate)
        profiles[pid] = PatientProfile(
            patient_id=pid,
            gender=("female", "male")[int(rng.integers(0, 2))],
            age_at_baseline=round(float(rng.uniform(19.5, 87.6)), 1),
            ckd_cause=CKD_CAUSES[int(rng.integers(0, len(CKD_CAUSES)))],
            smoking=SMOKING[int(rng.integers(0, 3))],
            drinking_frequency=DRINKING[int(rng.integers(0, 3))],
            ckd_stage=_stage_for(baseline),
            charlson_index=int(rng.integers(0, 7)),
            comorbidities=comorbidities,
            medications=medications,
        )

    return Cohort(profiles, visits)


def exact_linear_spec(n_patients: int = 50, **overrides) -> SyntheticSpec:
    """Zero-noise linear trajectories, useful as an exact-fit fixture."""
    params = dict(n_patients=n_patients, family="linear", noise_sd=0.0)
    params.update(overrides)
    return SyntheticSpec(**params)


__all__ = ["SyntheticSpec", "generate_synthetic_cohort", "exact_linear_spec", "FAMILIES"]
