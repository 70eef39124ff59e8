"""Per-cell MAE/MAPE tables in the layout of the comparison and model-ensemble tables."""

from __future__ import annotations

import csv
import io
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from egfrlmm.ensemble import EnsembleTables
from egfrlmm.errors import PairingError, ReportError
from egfrlmm.metrics import SignificanceResult, mae, mape, paired_test

SPLITS = ("train", "validation")
ENSEMBLE_ROW = "ensemble"
BASELINE_ROW = "-"
MODEL_ENSEMBLE_SYSTEM = "model-ensemble"

COMPARISON_FILES = ("comparison.csv", "comparison.txt")
MODEL_ENSEMBLE_FILES = ("model_ensemble.csv", "model_ensemble.txt")


@dataclass(frozen=True)
class MetricsRow:
    system: str
    prompt: str  # template id as text, "ensemble", or "-" for baselines
    split: str
    mae: float | None  # None when every attempted window failed
    mape: float | None
    n_windows: int
    n_failed: int

    @property
    def attempted(self) -> int:
        return self.n_windows + self.n_failed


@dataclass(frozen=True)
class SignificanceRow:
    system: str
    prompt: str
    baseline: str
    split: str
    result: SignificanceResult | None
    note: str = ""


@dataclass
class MetricsReport:
    backends: tuple[str, ...]
    templates: tuple[int, ...]
    baselines: tuple[str, ...]
    rows: list[MetricsRow]
    significance: list[SignificanceRow] = field(default_factory=list)

    def row(self, system: str, prompt: str, split: str) -> MetricsRow:
        for r in self.rows:
            if (r.system, r.prompt, r.split) == (system, prompt, split):
                return r
        raise KeyError((system, prompt, split))


def score_cell(
    system: str,
    prompt: str,
    split: str,
    predicted: Mapping[str, float],
    attempted: Sequence[str],
    actuals: Mapping[str, float],
) -> MetricsRow:
    """Metrics for one cell over the windows that produced a value."""
    ok = [w for w in attempted if w in predicted]
    if not ok:
        return MetricsRow(system, prompt, split, None, None, 0, len(attempted))
    a = [actuals[w] for w in ok]
    p = [predicted[w] for w in ok]
    return MetricsRow(system, prompt, split, mae(a, p), mape(a, p), len(ok), len(attempted) - len(ok))


def cell_predictions(
    tables: EnsembleTables,
    backends: Sequence[str],
    templates: Sequence[int],
) -> dict[tuple[str, str], dict[str, float]]:
    """Window -> value for every LMM cell, keyed by (system, prompt label)."""
    cells: dict[tuple[str, str], dict[str, float]] = {}
    for b in backends:
        for t in templates:
            cells[(b, str(t))] = {}
        cells[(b, ENSEMBLE_ROW)] = {}
    for t in templates:
        cells[(MODEL_ENSEMBLE_SYSTEM, str(t))] = {}
    for (w, b, t), r in tables.repeat.items():
        if (b, str(t)) in cells:
            cells[(b, str(t))][w] = r.value
    for (w, b), r in tables.prompt.items():
        if (b, ENSEMBLE_ROW) in cells:
            cells[(b, ENSEMBLE_ROW)][w] = r.value
    for (w, t), r in tables.model.items():
        if (MODEL_ENSEMBLE_SYSTEM, str(t)) in cells:
            cells[(MODEL_ENSEMBLE_SYSTEM, str(t))][w] = r.value
    return cells


def build_report(
    tables: EnsembleTables,
    actuals: Mapping[str, float],
    split_of: Mapping[str, str],
    backends: Sequence[str],
    templates: Sequence[int],
    baselines: Mapping[str, Mapping[str, float]] | None = None,
    significance: bool = True,
) -> MetricsReport:
    """Score every (system, prompt, split) cell.

    ``actuals`` and ``split_of`` cover every window that was attempted; each LMM cell
    attempted all windows of its split. ``baselines`` maps a baseline name to its
    window -> prediction table.
    """
    if not backends or not templates or not actuals:
        raise ReportError("empty cell grid: need at least one backend, template and window")
    unknown = set(actuals) ^ set(split_of)
    if unknown:
        raise ReportError(f"windows without a split assignment or actual: {sorted(unknown)[:5]}")
    by_split = {s: sorted(w for w, sp in split_of.items() if sp == s) for s in SPLITS}
    baselines = dict(baselines or {})

    cells = cell_predictions(tables, backends, templates)
    rows: list[MetricsRow] = []
    for name, preds in baselines.items():
        for s in SPLITS:
            rows.append(score_cell(name, BASELINE_ROW, s, preds, by_split[s], actuals))
    for (system, prompt), preds in cells.items():
        for s in SPLITS:
            rows.append(score_cell(system, prompt, s, preds, by_split[s], actuals))

    report = MetricsReport(tuple(backends), tuple(templates), tuple(baselines), rows)
    if significance:
        report.significance = _significance(cells, baselines, by_split, actuals)
    return report


def _significance(cells, baselines, by_split, actuals) -> list[SignificanceRow]:
    out = []
    for (system, prompt), preds in cells.items():
        for name, base in baselines.items():
            for s in SPLITS:
                common = [w for w in by_split[s] if w in preds and w in base]
                err_a = {w: abs(actuals[w] - preds[w]) for w in common}
                err_b = {w: abs(actuals[w] - base[w]) for w in common}
                try:
                    result = paired_test(err_a, err_b, f"{system}/{prompt}", name, s)
                except PairingError as exc:
                    out.append(SignificanceRow(system, prompt, name, s, None, f"skipped: {exc}"))
                    continue
                out.append(SignificanceRow(system, prompt, name, s, result))
    return out


# Renderings


def _cell_text(r: MetricsRow, value: float | None, decimals: int) -> str:
    return f"n/a ({r.n_failed} failed)" if value is None else f"{value:.{decimals}f}"


def comparison_rows(report: MetricsReport) -> list[tuple[str, str]]:
    """(system, prompt) pairs in display order: baselines first, then each backend."""
    order = [(b, BASELINE_ROW) for b in report.baselines]
    for b in report.backends:
        order += [(b, str(t)) for t in report.templates] + [(b, ENSEMBLE_ROW)]
    return order


def model_ensemble_rows(report: MetricsReport) -> list[tuple[str, str]]:
    return [(MODEL_ENSEMBLE_SYSTEM, str(t)) for t in report.templates]


_CSV_HEADER = (
    "train_mae",
    "train_mape",
    "validation_mae",
    "validation_mape",
    "train_n_windows",
    "train_n_failed",
    "validation_n_windows",
    "validation_n_failed",
)


def _csv(report: MetricsReport, keys, first_cols, label) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*first_cols, *_CSV_HEADER])
    for system, prompt in keys:
        tr, va = report.row(system, prompt, "train"), report.row(system, prompt, "validation")
        lead = label(system, prompt)
        writer.writerow(
            [
                *lead,
                "" if tr.mae is None else repr(tr.mae),
                "" if tr.mape is None else repr(tr.mape),
                "" if va.mae is None else repr(va.mae),
                "" if va.mape is None else repr(va.mape),
                tr.n_windows,
                tr.n_failed,
                va.n_windows,
                va.n_failed,
            ]
        )
    return buf.getvalue()


def _text(report: MetricsReport, keys, title, first_headers, label, decimals) -> str:
    header_top = [*["" for _ in first_headers], "Train", "", "Validation", ""]
    header = [*first_headers, "MAE", "MAPE(%)", "MAE", "MAPE(%)"]
    body = []
    previous = None
    for system, prompt in keys:
        tr, va = report.row(system, prompt, "train"), report.row(system, prompt, "validation")
        lead = list(label(system, prompt))
        if len(lead) == 2 and lead[0] == previous:
            lead[0] = ""
        else:
            previous = lead[0]
        body.append(
            [
                *lead,
                _cell_text(tr, tr.mae, decimals),
                _cell_text(tr, tr.mape, decimals),
                _cell_text(va, va.mae, decimals),
                _cell_text(va, va.mape, decimals),
            ]
        )
    table = [header_top, header, *body]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = [title, ""]
    for r in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_comparison_table(report: MetricsReport, decimals: int = 2) -> tuple[str, str]:
    """(csv text, formatted text) of the per-model comparison table."""
    keys = comparison_rows(report)

    def label(system, prompt):
        return (system, prompt)

    return (
        _csv(report, keys, ("model", "prompt"), label),
        _text(report, keys, "Model performance by prompt", ("Model", "Prompt"), label, decimals),
    )


def render_model_ensemble_table(report: MetricsReport, decimals: int = 2) -> tuple[str, str]:
    """(csv text, formatted text) of the model-ensemble table."""
    keys = model_ensemble_rows(report)

    def label(system, prompt):
        return (f"prompt {prompt}",)

    return (
        _csv(report, keys, ("prompt",), label),
        _text(report, keys, "Model ensemble by prompt", ("Prompt",), label, decimals),
    )


def render_long(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["system", "prompt", "split", "mae", "mape", "n_windows", "n_failed"])
    for r in report.rows:
        writer.writerow(
            [
                r.system,
                r.prompt,
                r.split,
                "" if r.mae is None else repr(r.mae),
                "" if r.mape is None else repr(r.mape),
                r.n_windows,
                r.n_failed,
            ]
        )
    return buf.getvalue()


def render_significance(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["system", "prompt", "baseline", "split", "test", "statistic", "p_value", "n_pairs", "n_nonzero", "method", "note"]
    )
    for s in report.significance:
        r = s.result
        if r is None:
            writer.writerow([s.system, s.prompt, s.baseline, s.split, "", "", "", "", "", "", s.note])
        else:
            writer.writerow(
                [
                    s.system,
                    s.prompt,
                    s.baseline,
                    s.split,
                    r.test,
                    repr(r.statistic),
                    repr(r.p_value),
                    r.n_pairs,
                    r.n_nonzero,
                    r.method,
                    s.note,
                ]
            )
    return buf.getvalue()


def write_report(report: MetricsReport, out_dir: str | Path, decimals: int = 2) -> list[Path]:
    """Write all renditions; returns the paths written, in a fixed order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmp_csv, cmp_txt = render_comparison_table(report, decimals)
    ens_csv, ens_txt = render_model_ensemble_table(report, decimals)
    files = {
        "comparison.csv": cmp_csv,
        "comparison.txt": cmp_txt,
        "model_ensemble.csv": ens_csv,
        "model_ensemble.txt": ens_txt,
        "metrics_long.csv": render_long(report),
        "significance.csv": render_significance(report),
    }
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
