"""The eleven acceptance criteria, each reported as one PASS/FAIL line."""

from __future__ import annotations

import csv
import io
import json
import random
import socket
import time

import httpx
import numpy as np
import pytest

from conftest import FIXTURES, cohort_from, record_criterion
from egfrlmm.backends import MockPolicy, echo_sentence, mock_predict, replay_run
from egfrlmm.baselines import ForestParams, rf_predict, rf_train
from egfrlmm.cohort import PredictionWindow, generate_windows, load_cohort, preprocess
from egfrlmm.config import load_config
from egfrlmm.ensemble import build_ensembles
from egfrlmm.extraction import extract_pattern, extract_prediction
from egfrlmm.metrics import mae, mape
from egfrlmm.pipeline import BASELINE_NAMES, Pipeline
from egfrlmm.report import build_report, render_long, render_comparison_table, render_model_ensemble_table, comparison_rows
from test_cnn import finite_difference_error, toy_problem
from test_cohort import EXPECTED_AUDIT, EXPECTED_SURVIVORS
from test_ensemble import check_against_oracle, random_table
from test_forest import FOUR_X, FOUR_Y, SINGLE_STUMP, brute_force_split
from test_report import BACKENDS, TEMPLATES, make_report

pytestmark = pytest.mark.acceptance


def write_config(tmp_path, name, body):
    path = tmp_path / f"{name}.yaml"
    path.write_text(body, encoding="utf-8")
    return load_config(path)


def long_rows(run_dir):
    text = (run_dir / "report" / "metrics_long.csv").read_text(encoding="utf-8")
    return {(r["system"], r["prompt"], r["split"]): r for r in csv.DictReader(io.StringIO(text))}


def window_table(run_dir):
    data = json.loads((run_dir / "windows" / "windows.json").read_text(encoding="utf-8"))
    windows = [PredictionWindow.from_dict(w) for w in data["windows"]]
    split_of = {}
    for name, members in data["split"].items():
        for w in windows:
            if w.patient_id in members:
                split_of[w.window_id] = name
    return windows, split_of


class NoNetwork:
    """Counts (and refuses) every outbound socket connection."""

    def __init__(self, monkeypatch):
        self.attempts = 0
        real_connect = socket.socket.connect

        def connect(sock, address):
            if sock.family in (socket.AF_INET, socket.AF_INET6):
                self.attempts += 1
                raise OSError("network disabled during acceptance run")
            return real_connect(sock, address)

        monkeypatch.setattr(socket.socket, "connect", connect)


def refuse(request):
    raise AssertionError(f"unexpected HTTP request to {request.url}")


# 1 -------------------------------------------------------------------------

EXACT_FIT = """\
run_id: exact
output_dir: out
seeds: {split: 7, synthetic: 1, mocks: 0, baselines: 0}
cohort:
  source: synthetic
  synthetic: {n_patients: 50, family: linear, noise_sd: 0.0}
backends:
  - {id: linear, kind: mock, policy: linear}
parallelism: 8
"""


def test_c01_offline_exact_fit(tmp_path, monkeypatch):
    guard = NoNetwork(monkeypatch)
    cfg = write_config(tmp_path, "exact", EXACT_FIT)
    client = httpx.Client(transport=httpx.MockTransport(refuse))
    start = time.perf_counter()
    result = Pipeline(cfg, offline=True, http_client=client).run()
    elapsed = time.perf_counter() - start
    rows = long_rows(cfg.run_dir)
    log = json.loads((cfg.run_dir / "query" / "run_log.json").read_text())
    worst_mae = max(float(rows[("linear", str(t), "validation")]["mae"]) for t in TEMPLATES)
    worst_mape = max(float(rows[("linear", str(t), "validation")]["mape"]) for t in TEMPLATES)
    failed = sum(int(rows[("linear", str(t), "validation")]["n_failed"]) for t in TEMPLATES)
    ok = (
        result.exit_code == 0
        and worst_mae <= 0.01
        and worst_mape <= 0.1
        and failed == 0
        and elapsed < 60
        and guard.attempts == 0
        and log["network_requests"] == 0
    )
    detail = (
        f"max validation MAE {worst_mae:.2e}, MAPE {worst_mape:.2e}%, {elapsed:.1f}s, "
        f"{guard.attempts} socket attempts, {log['network_requests']} network requests"
    )
    assert record_criterion(1, "offline end-to-end exact fit", ok, detail), detail


# 2 -------------------------------------------------------------------------

PERSISTENCE = """\
run_id: persist
output_dir: out
seeds: {split: 3, synthetic: 5, mocks: 0, baselines: 0}
cohort:
  source: synthetic
  synthetic: {n_patients: 30, family: noisy, noise_sd: 2.5}
repeats: 2
backends:
  - {id: persistence, kind: mock, policy: persistence}
baselines: {enabled: false}
"""


def test_c02_persistence_oracle(tmp_path):
    cfg = write_config(tmp_path, "persist", PERSISTENCE)
    Pipeline(cfg, offline=True).run()
    windows, split_of = window_table(cfg.run_dir)
    rows = long_rows(cfg.run_dir)
    worst = 0.0
    checked = 0
    for split in ("train", "validation"):
        ws = [w for w in windows if split_of[w.window_id] == split]
        oracle = sum(abs(w.target_visit.egfr - w.observed_visits[-1].egfr) for w in ws) / len(ws)
        for prompt in [*map(str, TEMPLATES), "ensemble"]:
            reported = float(rows[("persistence", prompt, split)]["mae"])
            worst = max(worst, abs(reported - oracle))
            checked += 1
    ok = worst <= 1e-9 and checked == 10
    detail = f"{checked} cells, max |MAE - oracle| = {worst:.1e}"
    assert record_criterion(2, "persistence-oracle equivalence", ok, detail), detail


# 3 -------------------------------------------------------------------------


def test_c03_ensemble_oracle():
    rng = random.Random(1729)
    passed = sum(check_against_oracle(random_table(rng)) for _ in range(1000))
    ok = passed == 1000
    detail = f"{passed}/1000 randomized tables match the brute-force oracle"
    assert record_criterion(3, "ensemble oracle", ok, detail), detail


# 4 -------------------------------------------------------------------------


def test_c04_metric_units():
    hand = mae([10, 20], [12, 17]) == 2.5 and mape([10, 20], [12, 17]) == 17.5
    rng = random.Random(4)
    identity = True
    invariant = 0
    for _ in range(100):
        n = rng.randint(1, 30)
        a = [rng.uniform(2, 170) for _ in range(n)]
        p = [rng.uniform(2, 170) for _ in range(n)]
        identity &= mae(a, a) == 0.0 and mape(a, a) == 0.0
        k = 10 ** rng.uniform(-4, 4)
        base = mape(a, p)
        invariant += abs(mape([x * k for x in a], [y * k for y in p]) - base) <= 1e-12 * max(1.0, base)
    ok = hand and identity and invariant == 100
    detail = f"hand examples {'ok' if hand else 'WRONG'}, scale invariance {invariant}/100"
    assert record_criterion(4, "metric unit tests", ok, detail), detail


# 5 -------------------------------------------------------------------------


def test_c05_extraction_round_trip():
    rng = random.Random(5)
    values = [rng.uniform(1, 200) for _ in range(500)]
    recovered = sum(
        extract_pattern(echo_sentence(v, rng.randint(1, 1000), form)) == v for v in values for form in (1, 2, 3, 4)
    )

    windows = generate_windows(cohort_from({f"P{i}": [(90 * j, 60.0 - j) for j in range(7)] for i in range(8)}))
    ids = [w.window_id for w in windows]
    preds = []
    for w in windows:
        for t in TEMPLATES:
            policy = MockPolicy("malformed") if t == 3 else MockPolicy("linear")
            raw = mock_predict(policy, w, t)
            preds.append(extract_prediction(raw, window_id=w.window_id, template_id=t, backend_id="m", attempt_index=1))
    split_of = {wid: ("train" if i % 3 else "validation") for i, wid in enumerate(ids)}
    actuals = {w.window_id: w.target_visit.egfr for w in windows}
    report = build_report(build_ensembles(preds), actuals, split_of, ["m"], list(TEMPLATES), significance=False)
    malformed_failed = all(p.method == "failed" for p in preds if p.template_id == 3)
    balanced = all(r.n_windows + r.n_failed == sum(1 for s in split_of.values() if s == r.split) for r in report.rows)
    cell = report.row("m", "3", "validation")
    ok = recovered == 2000 and malformed_failed and balanced and cell.mae is None and cell.n_failed > 0
    detail = f"{recovered}/2000 values recovered, malformed cell n_failed={cell.n_failed}, bookkeeping balanced={balanced}"
    assert record_criterion(5, "extraction round-trip", ok, detail), detail


# 6 -------------------------------------------------------------------------


def test_c06_preprocessing_fixture():
    clean, audit = preprocess(load_cohort(FIXTURES / "visits.csv", FIXTURES / "profiles.csv"))
    survivors = {pid: [v.date.isoformat() for v in vs] for pid, vs in clean.visits.items()}
    ok = survivors == EXPECTED_SURVIVORS and audit == EXPECTED_AUDIT
    detail = f"{len(survivors)} surviving patients, {len(audit)} audit rows"
    assert record_criterion(6, "preprocessing fixture truth table", ok, detail), detail


# 7 -------------------------------------------------------------------------


def enumerate_windows(n_p: int, m: int, w0: int) -> list[int]:
    """Observed-prefix lengths by direct enumeration: stop at M windows or when no target is left."""
    lengths = []
    k = 1
    while k <= m:
        observed = w0 + k - 1
        if observed + 1 > n_p:
            break
        lengths.append(observed)
        k += 1
    return lengths


def test_c07_window_formula_grid():
    grid = [(n_p, m, w0) for n_p in (5, 7, 9, 12, 16) for m in (5, 8, 11) for w0 in (2, 3)]
    assert len(grid) == 30
    matches = 0
    for n_p, m, w0 in grid:
        # two filler patients with M visits pin the lower median at M
        c = cohort_from({
            "A": [(90 * j, 70.0 - j) for j in range(n_p)],
            "B": [(90 * j, 60.0) for j in range(m)],
            "C": [(90 * j, 50.0) for j in range(m)],
        })
        assert c.median_visit_count == m
        got = [len(w.observed_visits) for w in generate_windows(c, w0) if w.patient_id == "A"]
        expected = enumerate_windows(n_p, m, w0)
        formula = min(m, n_p - w0)
        matches += got == expected and len(got) == formula and got == [w0 + k - 1 for k in range(1, formula + 1)]
    ok = matches == 30
    detail = f"{matches}/30 (n_p, M, w0) combinations match"
    assert record_criterion(7, "window-generation formula", ok, detail), detail


# 8 -------------------------------------------------------------------------


def test_c08_cnn_gradient_check():
    params, seq, static, y = toy_problem(0)
    n_params = sum(p.size for p in params.values())
    err = finite_difference_error(params, seq, static, y)
    ok = err <= 1e-4 and params["conv1_w"].dtype == np.float64
    detail = f"{n_params} parameters, max relative error {err:.2e}"
    assert record_criterion(8, "CNN gradient check", ok, detail), detail


# 9 -------------------------------------------------------------------------


def test_c09_rf_split_oracle():
    tree = rf_train(FOUR_X, FOUR_Y, SINGLE_STUMP).trees[0]
    f, thr, _ = brute_force_split(FOUR_X, FOUR_Y)
    same_split = (int(tree.feature[0]), float(tree.threshold[0])) == (f, thr)
    rng = np.random.default_rng(9)
    X, y = rng.normal(size=(80, 10)), rng.uniform(5, 120, size=80)
    a = rf_predict(rf_train(X, y, ForestParams(n_trees=30), seed=21), X)
    b = rf_predict(rf_train(X, y, ForestParams(n_trees=30), seed=21), X)
    stable = a.tobytes() == b.tobytes()
    ok = same_split and stable
    detail = f"split (feature {tree.feature[0]}, threshold {tree.threshold[0]}) vs oracle ({f}, {thr}), bit-stable={stable}"
    assert record_criterion(9, "RF split oracle and determinism", ok, detail), detail


# 10 ------------------------------------------------------------------------

# Row labels and column headers the two report tables must reproduce.
EXPECTED_MODEL_ORDER = ["RF", "1D-CNN", "Gemini Flash", "Gemini Pro Vision", "GPT-4o", "Claude 3 Opus"]
PROMPT_ROWS = ["1", "2", "3", "4", "ensemble"]
TABLE_HEADER = ["MAE", "MAPE(%)", "MAE", "MAPE(%)"]
ENSEMBLE_ROWS = ["prompt 1", "prompt 2", "prompt 3", "prompt 4"]


def test_c10_report_structure():
    report, _ = make_report()
    expected_keys = [("RF", "-"), ("1D-CNN", "-")] + [(b, p) for b in BACKENDS for p in PROMPT_ROWS]
    models = list(dict.fromkeys(system for system, _ in comparison_rows(report)))
    keys_ok = comparison_rows(report) == expected_keys and models == EXPECTED_MODEL_ORDER
    cmp_csv, cmp_txt = render_comparison_table(report)
    ens_csv, ens_txt = render_model_ensemble_table(report)
    cmp_lines, ens_lines = cmp_txt.splitlines(), ens_txt.splitlines()
    cmp_ok = (
        cmp_lines[2].split() == ["Train", "Validation"]
        and cmp_lines[3].split()[2:] == TABLE_HEADER
        and len(cmp_lines) - 4 == 22
        and list(csv.reader(io.StringIO(cmp_csv)))[0][2:6] == ["train_mae", "train_mape", "validation_mae", "validation_mape"]
    )
    ens_ok = (
        ens_lines[2].split() == ["Train", "Validation"]
        and ens_lines[3].split()[1:] == TABLE_HEADER
        and [line[:8] for line in ens_lines[4:]] == ENSEMBLE_ROWS
        and [r[0] for r in list(csv.reader(io.StringIO(ens_csv)))[1:]] == ENSEMBLE_ROWS
    )
    ok = keys_ok and cmp_ok and ens_ok
    detail = f"per-model table {len(expected_keys)} rows x 4 metric columns, ensemble table {len(ENSEMBLE_ROWS)} rows"
    assert record_criterion(10, "report structure", ok, detail), detail


# 11 ------------------------------------------------------------------------

DETERMINISM = """\
run_id: det
output_dir: {out}
seeds: {{split: 11, synthetic: 2, mocks: 17, baselines: 4}}
cohort:
  source: synthetic
  synthetic: {{n_patients: 16}}
repeats: 3
backends:
  - {{id: noisy, kind: mock, policy: noisy, sigma: 3.0}}
  - {{id: persistence, kind: mock, policy: persistence}}
  - {{id: broken, kind: mock, policy: malformed}}
baselines:
  forest: {{n_trees: 20}}
  cnn: {{epochs: 30}}
"""


def test_c11_determinism_and_replay(tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = write_config(tmp_path, name, DETERMINISM.format(out=f"out_{name}"))
        Pipeline(cfg, offline=True).run()
        runs.append(cfg)
    a, b = (cfg.run_dir for cfg in runs)
    files = sorted(p.name for p in (a / "report").iterdir())
    identical = all((a / "report" / f).read_bytes() == (b / "report" / f).read_bytes() for f in files)
    identical &= (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    # replay run A purely from its cache and rebuild the metrics table
    cfg = runs[0]
    manifest = [json.loads(line) for line in (a / "query" / "requests.jsonl").read_text().splitlines()]
    preds = [
        extract_prediction(r.raw_text, window_id=r.window_id, template_id=r.template_id,
                           backend_id=r.backend_id, attempt_index=r.attempt_index)
        for r in replay_run(cfg.cache_path, manifest)
    ]
    windows, split_of = window_table(a)
    actuals = {w.window_id: w.target_visit.egfr for w in windows}
    baselines = json.loads((a / "baselines" / "predictions.json").read_text())["predictions"]
    replayed = build_report(
        build_ensembles(preds), actuals, split_of, [x.backend_id for x in cfg.backends], list(cfg.templates),
        {name: baselines[name] for name in BASELINE_NAMES}, significance=False,
    )
    same_metrics = render_long(replayed) == (a / "report" / "metrics_long.csv").read_text(encoding="utf-8")
    ok = identical and same_metrics and len(files) == 6
    detail = f"{len(files)} report files + manifest byte-identical={identical}, replayed metrics identical={same_metrics}"
    assert record_criterion(11, "determinism and cache replay", ok, detail), detail
