from __future__ import annotations

from datetime import date, timedelta
from pathlib import Path

import pytest

from egfrlmm.cohort import Cohort, PatientProfile, PredictionWindow, VisitRecord

FIXTURES = Path(__file__).parent / "fixtures"
BASE_DATE = date(2020, 1, 1)


def visit(pid: str, day: int, egfr: float, **labs) -> VisitRecord:
    return VisitRecord(patient_id=pid, date=BASE_DATE + timedelta(days=day), egfr=egfr, **labs)


def profile(pid: str, **overrides) -> PatientProfile:
    fields = dict(
        patient_id=pid,
        gender="female",
        age_at_baseline=61.5,
        ckd_cause="hypertensive nephropathy",
        smoking="never",
        drinking_frequency="never",
        ckd_stage=3,
        charlson_index=2,
    )
    fields.update(overrides)
    return PatientProfile(**fields)


def window(egfrs, days=None, target=None, target_day=None, pid="P001", index=1, **labs) -> PredictionWindow:
    """A window over the given eGFR history; visits 90 days apart unless ``days`` given."""
    days = list(days) if days is not None else [90 * i for i in range(len(egfrs))]
    observed = tuple(visit(pid, d, e, **labs) for d, e in zip(days, egfrs))
    tday = target_day if target_day is not None else days[-1] + 90
    return PredictionWindow(pid, index, observed, visit(pid, tday, target if target is not None else egfrs[-1]))


def cohort_from(series: dict[str, list[tuple[int, float]]]) -> Cohort:
    return Cohort(
        profiles={pid: profile(pid) for pid in series},
        visits={pid: tuple(visit(pid, d, e) for d, e in vs) for pid, vs in series.items()},
    )


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURES


SMALL_RUN = """\
run_id: {run_id}
output_dir: {output_dir}
seeds: {{split: 7, synthetic: 1, mocks: 0, baselines: 0}}
cohort:
  source: synthetic
  synthetic: {{n_patients: {n_patients}, family: linear, noise_sd: {noise}}}
repeats: 2
backends:
{backends}
baselines:
  forest: {{n_trees: 10}}
  cnn: {{epochs: 15}}
parallelism: 4
"""

MOCK_BACKENDS = "  - {id: lin, kind: mock, policy: linear}\n  - {id: per, kind: mock, policy: persistence}\n"


def small_config(tmp_path: Path, *, run_id="r1", output_dir="out", n_patients=12, noise=0.0,
                 backends=MOCK_BACKENDS, extra="") -> Path:
    """Write a quick offline config to ``tmp_path/cfg.yaml`` and return its path."""
    path = tmp_path / "cfg.yaml"
    path.write_text(
        SMALL_RUN.format(run_id=run_id, output_dir=output_dir, n_patients=n_patients, noise=noise,
                         backends=backends) + extra,
        encoding="utf-8",
    )
    return path


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")
    print(line)
    ACCEPTANCE_RESULTS[number] = line
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
