"""Tabular encodings of prediction windows for the baseline models.

Only observed visits and the forecast horizon are read; the target visit is never
touched, and neither are chart images.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from egfrlmm.cohort import COMORBIDITIES, MEDICATIONS, PatientProfile, PredictionWindow

LABS = ("bun", "phosphorus", "uacr")
MAX_SEQUENCE_LENGTH = 12

FEATURE_NAMES: tuple[str, ...] = (
    "egfr_lag2",
    "egfr_lag1",
    "egfr_last",
    *(n for lab in LABS for n in (lab, f"{lab}_missing")),
    "next_day_diff",
    "age_at_baseline",
    "gender_male",
    "ckd_stage",
    *(f"comorbidity_{name}" for name, _ in COMORBIDITIES),
    *(f"medication_{name}" for name, _ in MEDICATIONS),
    "charlson_index",
)


def last_egfrs(window: PredictionWindow, k: int) -> list[float]:
    """The last ``k`` observed eGFR values, left-padded with the earliest one."""
    values = [v.egfr for v in window.observed_visits[-k:]]
    return [values[0]] * (k - len(values)) + values


def sequence_length(initial_width: int, median_visits: int) -> int:
    return min(initial_width + median_visits - 1, MAX_SEQUENCE_LENGTH)


def sequence_input(window: PredictionWindow, length: int) -> np.ndarray:
    """Fixed-length eGFR history, most recent last, left-padded with the earliest value."""
    return np.asarray(last_egfrs(window, length), dtype=np.float64)


@dataclass(frozen=True)
class FeatureEncoder:
    # Training-split means used in place of missing labs.
    lab_fill: tuple[float, float, float]

    @classmethod
    def fit(cls, windows: Iterable[PredictionWindow]) -> "FeatureEncoder":
        sums = [[] for _ in LABS]
        for w in windows:
            last = w.last_observed
            for i, lab in enumerate(LABS):
                value = getattr(last, lab)
                if value is not None:
                    sums[i].append(value)
        return cls(tuple(float(np.mean(s)) if s else 0.0 for s in sums))

    @property
    def dimension(self) -> int:
        return len(FEATURE_NAMES)

    def encode(self, window: PredictionWindow, profile: PatientProfile) -> np.ndarray:
        last = window.last_observed
        row: list[float] = list(last_egfrs(window, 3))
        for i, lab in enumerate(LABS):
            value = getattr(last, lab)
            row += [self.lab_fill[i], 1.0] if value is None else [value, 0.0]
        row += [
            float(window.next_day_diff),
            float(profile.age_at_baseline),
            1.0 if profile.gender == "male" else 0.0,
            float(profile.ckd_stage),
        ]
        row += [1.0 if name in profile.comorbidities else 0.0 for name, _ in COMORBIDITIES]
        row += [1.0 if name in profile.medications else 0.0 for name, _ in MEDICATIONS]
        row.append(float(profile.charlson_index))
        return np.asarray(row, dtype=np.float64)

    def encode_many(
        self, windows: Sequence[PredictionWindow], profiles: Mapping[str, PatientProfile]
    ) -> np.ndarray:
        if not windows:
            return np.zeros((0, self.dimension))
        return np.vstack([self.encode(w, profiles[w.patient_id]) for w in windows])

    def to_dict(self) -> dict:
        return {"lab_fill": list(self.lab_fill)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureEncoder":
        return cls(tuple(float(x) for x in d["lab_fill"]))


def targets(windows: Iterable[PredictionWindow]) -> np.ndarray:
    return np.asarray([w.target_visit.egfr for w in windows], dtype=np.float64)
