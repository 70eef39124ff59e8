"""Content-addressed pipeline stages.

Each stage writes its artifacts under ``<run_dir>/<stage>/`` and records a key in
``state.json``. A stage key hashes the config slice the stage reads plus the keys of
the stages it depends on, so editing one section only invalidates the stages
downstream of it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import httpx
import numpy as np

from egfrlmm.backends import Backend, ModelResponse, ResponseCache, cache_key, query
from egfrlmm.baselines import (
    FeatureEncoder,
    cnn_train,
    rf_train,
    sequence_input,
    sequence_length,
    targets,
)
from egfrlmm.chartgen import chart_filename, export_chart, render_trajectory
from egfrlmm.cohort import (
    Cohort,
    PredictionWindow,
    generate_windows,
    load_cohort,
    preprocess,
    split_patients,
    write_audit,
)
from egfrlmm.config import RunConfig, canonical_json
from egfrlmm.ensemble import EnsembleResult, EnsembleTables, Member, build_ensembles
from egfrlmm.errors import StageOrderError, TransportError, ValidationError
from egfrlmm.extraction import Prediction, extract_prediction, extraction_audit
from egfrlmm.prompting import (
    PromptInstance,
    PromptTemplate,
    builtin_templates,
    compose_data_text,
    load_template_file,
    render_prompt,
)
from egfrlmm.report import build_report, write_report
from egfrlmm.synthetic import generate_synthetic_cohort

logger = logging.getLogger(__name__)

PIPELINE_VERSION = 1
STAGES = ("ingest", "windows", "render", "query", "extract", "ensemble", "baselines", "report")
DEPENDS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "windows": ("ingest",),
    "render": ("windows",),
    "query": ("render",),
    "extract": ("query",),
    "ensemble": ("extract",),
    "baselines": ("windows",),
    "report": ("ensemble", "baselines"),
}
BASELINE_NAMES = ("RF", "1D-CNN")
# Keys that decide where a run lives or how fast it goes, but not what it computes.
NON_SEMANTIC_KEYS = frozenset({"run_id", "output_dir", "cache_dir", "parallelism"})


def downstream(stage: str) -> list[str]:
    """Stages that depend on ``stage``, directly or transitively."""
    found: list[str] = []
    for s in STAGES:
        if any(d == stage or d in found for d in DEPENDS[s]):
            found.append(s)
    return found


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash(obj) -> str:
    return _sha256_bytes(canonical_json(obj).encode())


def config_digest(config: RunConfig) -> str:
    return _hash({k: v for k, v in config.raw.items() if k not in NON_SEMANTIC_KEYS})


def _file_digest(path: Path) -> str:
    try:
        return _sha256_bytes(path.read_bytes())
    except OSError as exc:
        raise ValidationError(f"cannot read input file {path}: {exc}") from exc


def stage_slices(config: RunConfig) -> dict[str, dict]:
    raw = config.raw
    seeds = config.seeds
    ingest = {"cohort": raw.get("cohort"), "seed": seeds.get("synthetic")}
    if config.cohort.kind == "files":
        ingest["inputs"] = [
            _file_digest(config.resolve(config.cohort.visits_path)),
            _file_digest(config.resolve(config.cohort.profiles_path)),
        ]
    custom = [
        {"id": c.template_id, "kind": c.kind, "digest": _file_digest(config.resolve(c.path))}
        for c in config.custom_templates
    ]
    return {
        "ingest": ingest,
        "windows": {"windows": raw.get("windows"), "split": raw.get("split"), "seed": seeds["split"]},
        "render": {"chart": raw.get("chart")},
        "query": {
            "templates": raw.get("templates"),
            "custom_templates": custom,
            "backends": raw.get("backends"),
            "repeats": raw.get("repeats"),
            "lab_visit": raw.get("lab_visit"),
            "seed": seeds["mocks"],
        },
        "extract": {"extraction": raw.get("extraction")},
        "ensemble": {"ensemble": raw.get("ensemble")},
        "baselines": {"baselines": raw.get("baselines"), "seed": seeds["baselines"]},
        "report": {"report": raw.get("report")},
    }


def stage_keys(config: RunConfig) -> dict[str, str]:
    slices = stage_slices(config)
    keys: dict[str, str] = {}
    for stage in STAGES:
        keys[stage] = _hash(
            {
                "version": PIPELINE_VERSION,
                "stage": stage,
                "slice": slices[stage],
                "upstream": [keys[d] for d in DEPENDS[stage]],
            }
        )
    return keys


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass(frozen=True)
class StoredChart:
    """A chart already on disk: its pixel digest plus lazy PNG bytes for remote backends."""

    path: Path
    digest: str

    def png_bytes(self) -> bytes:
        return self.path.read_bytes()


@dataclass
class RunResult:
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    transport_errors: int = 0

    @property
    def exit_code(self) -> int:
        return 2 if self.transport_errors else 0


class Pipeline:
    def __init__(
        self,
        config: RunConfig,
        *,
        offline: bool = False,
        http_client: httpx.Client | None = None,
        backend_factory: Callable[..., Backend] = Backend,
    ):
        self.config = config
        self.offline = offline
        self.http_client = http_client
        self.backend_factory = backend_factory
        self.run_dir = config.run_dir
        self.keys = stage_keys(config)
        self.config_digest = config_digest(config)
        self.cache = ResponseCache(config.cache_path)

    # State bookkeeping

    @property
    def state_path(self) -> Path:
        return self.run_dir / "state.json"

    def load_state(self) -> dict:
        if self.state_path.exists():
            return _read_json(self.state_path)
        return {"stages": {}}

    def _save_state(self, state: dict) -> None:
        _write_json(self.state_path, state)

    def stage_dir(self, stage: str) -> Path:
        return self.run_dir / stage

    def is_current(self, stage: str, state: dict | None = None) -> bool:
        state = state or self.load_state()
        record = state["stages"].get(stage)
        return (
            record is not None
            and record.get("key") == self.keys[stage]
            and self.stage_dir(stage).is_dir()
        )

    def _check_upstream(self, stage: str, state: dict) -> None:
        for dep in DEPENDS[stage]:
            if not self.is_current(dep, state):
                raise StageOrderError(
                    f"stage {stage!r} needs up-to-date artifacts from {dep!r}; run that stage first (or --all)"
                )

    def run(self, stages: Sequence[str] | None = None, force: bool = False) -> RunResult:
        result = RunResult()
        for stage in stages or STAGES:
            if stage not in STAGES:
                raise ValidationError(f"unknown stage {stage!r}; stages are {STAGES}")
            state = self.load_state()
            self._check_upstream(stage, state)
            record = state["stages"].get(stage, {})
            if not force and self.is_current(stage, state) and not record.get("transport_errors"):
                logger.info("stage %s: up to date, skipped", stage)
                result.skipped.append(stage)
                continue
            logger.info("stage %s: running", stage)
            out = self.stage_dir(stage)
            if out.exists():
                shutil.rmtree(out)
            out.mkdir(parents=True)
            info = getattr(self, f"_stage_{stage}")(out) or {}
            state = self.load_state()
            state["stages"][stage] = {"key": self.keys[stage], "config_digest": self.config_digest, **info}
            # Fresh upstream output makes every dependent artifact stale.
            for later in downstream(stage):
                state["stages"].pop(later, None)
            self._save_state(state)
            result.executed.append(stage)
            result.transport_errors += int(info.get("transport_errors", 0))
        return result

    # Loaders for upstream artifacts

    def cohort(self) -> Cohort:
        return Cohort.from_dict(_read_json(self.stage_dir("ingest") / "cohort.json")["cohort"])

    def windows(self) -> tuple[list[PredictionWindow], dict[str, list[str]]]:
        data = _read_json(self.stage_dir("windows") / "windows.json")
        return [PredictionWindow.from_dict(w) for w in data["windows"]], data["split"]

    def templates(self) -> dict[int, PromptTemplate]:
        available = builtin_templates()
        for c in self.config.custom_templates:
            available[c.template_id] = load_template_file(self.config.resolve(c.path), c.template_id, c.kind)
        return {t: available[t] for t in self.config.templates}

    def predictions(self) -> list[Prediction]:
        return [Prediction(**row) for row in _read_jsonl(self.stage_dir("extract") / "predictions.jsonl")]

    def ensembles(self) -> EnsembleTables:
        return tables_from_dict(_read_json(self.stage_dir("ensemble") / "ensembles.json"))

    def baseline_predictions(self) -> dict[str, dict[str, float]]:
        stored = _read_json(self.stage_dir("baselines") / "predictions.json")["predictions"]
        # the JSON keys come back sorted; report rows follow the declared baseline order
        return {name: stored[name] for name in BASELINE_NAMES if name in stored}

    def _backend(self, backend_config, windows) -> Backend:
        return self.backend_factory(
            backend_config,
            windows={w.window_id: w for w in windows},
            http_client=self.http_client,
            offline=self.offline,
        )

    # Stages

    def _stage_ingest(self, out: Path) -> dict:
        cfg = self.config
        if cfg.cohort.kind == "synthetic":
            raw = generate_synthetic_cohort(cfg.cohort.synthetic, cfg.seeds["synthetic"])
        else:
            raw = load_cohort(cfg.resolve(cfg.cohort.visits_path), cfg.resolve(cfg.cohort.profiles_path))
        clean, audit = preprocess(raw)
        _write_json(
            out / "cohort.json",
            {"config_digest": self.config_digest, "cohort_digest": clean.digest(), "cohort": clean.to_dict()},
        )
        write_audit(audit, out / "audit.csv")
        return {
            "patients_in": raw.patient_count,
            "patients_out": clean.patient_count,
            "audit_rows": len(audit),
        }

    def _stage_windows(self, out: Path) -> dict:
        cfg = self.config
        cohort = self.cohort()
        windows = generate_windows(cohort, cfg.initial_width)
        train, validation = split_patients(cohort, cfg.train_fraction, cfg.seeds["split"])
        _write_json(
            out / "windows.json",
            {
                "config_digest": self.config_digest,
                "median_visit_count": cohort.median_visit_count,
                "split": {"train": train, "validation": validation},
                "windows": [w.to_dict() for w in windows],
            },
        )
        return {"windows": len(windows)}

    def _stage_render(self, out: Path) -> dict:
        windows, _ = self.windows()
        charts_dir = out / "charts"
        charts_dir.mkdir()
        style = self.config.chart

        def one(w: PredictionWindow):
            image = render_trajectory(w, style)
            export_chart(image, charts_dir / chart_filename(w.window_id))
            return w.window_id, {"file": chart_filename(w.window_id), "digest": image.digest}

        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            charts = dict(pool.map(one, windows))
        _write_json(out / "charts.json", {"config_digest": self.config_digest, "charts": charts})
        return {"charts": len(charts)}

    def charts(self) -> dict[str, StoredChart]:
        base = self.stage_dir("render")
        data = _read_json(base / "charts.json")["charts"]
        return {wid: StoredChart(base / "charts" / c["file"], c["digest"]) for wid, c in data.items()}

    def prompt_instances(self, windows, charts) -> dict[tuple[str, int], PromptInstance]:
        profiles = self.cohort().profiles
        templates = self.templates()
        out = {}
        for w in windows:
            lab_visit = None
            if self.config.lab_visit is not None:
                lab_visit = min(self.config.lab_visit, len(w.observed_visits))
            data_text = compose_data_text(w, profiles[w.patient_id], lab_visit)
            for tid, template in templates.items():
                out[(w.window_id, tid)] = render_prompt(template, w, data_text, charts[w.window_id].digest)
        return out

    def _stage_query(self, out: Path) -> dict:
        cfg = self.config
        windows, _ = self.windows()
        charts = self.charts()
        prompts = self.prompt_instances(windows, charts)
        backends = [self._backend(b, windows) for b in cfg.backends]

        cells = [
            (w.window_id, b, tid, a)
            for w in windows
            for b in backends
            for tid in cfg.templates
            for a in range(1, cfg.repeats + 1)
        ]

        def one(cell):
            wid, backend, tid, attempt = cell
            prompt = prompts[(wid, tid)]
            chart = charts[wid]
            key = cache_key(backend.backend_id, backend.config.model_name, prompt.text_digest, chart.digest, attempt)
            base = {
                "attempt_index": attempt,
                "backend_id": backend.backend_id,
                "cache_key": key,
                "template_id": tid,
                "window_id": wid,
            }
            try:
                response: ModelResponse = query(backend, prompt, chart, attempt, self.cache)
            except TransportError as exc:
                logger.warning("%s %s t%d a%d: %s", backend.backend_id, wid, tid, attempt, exc)
                return {**base, "status": "error", "error": str(exc)}, None, False
            return {**base, "status": "ok"}, response.raw_text, response.from_cache

        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            results = list(pool.map(one, cells))

        _write_jsonl(out / "requests.jsonl", (r for r, _, _ in results))
        _write_jsonl(out / "responses.jsonl", ({**r, "raw_text": raw} for r, raw, _ in results if raw is not None))
        errors = sum(1 for r, _, _ in results if r["status"] == "error")
        hits = sum(1 for _, _, hit in results if hit)
        network = sum(b.request_count for b in backends)
        logger.info("query: %d cells, %d cache hits, %d network requests, %d errors", len(cells), hits, network, errors)
        _write_json(
            out / "run_log.json",
            {"cells": len(cells), "cache_hits": hits, "network_requests": network, "transport_errors": errors},
        )
        return {"cells": len(cells), "transport_errors": errors}

    def _secondary_ask(self, windows) -> Callable[[str, str, int], str] | None:
        if not self.config.secondary_backend:
            return None
        backend = self._backend(self.config.backend(self.config.secondary_backend), windows)

        def ask(text: str, window_id: str, attempt: int) -> str:
            prompt = PromptInstance(template_id=0, rendered_text=text, window_id=window_id, image_digest="")
            return query(backend, prompt, None, attempt, self.cache).raw_text

        return ask

    def _stage_extract(self, out: Path) -> dict:
        cfg = self.config
        windows, _ = self.windows()
        ask = self._secondary_ask(windows)
        responses = {
            (r["window_id"], r["backend_id"], r["template_id"], r["attempt_index"]): r["raw_text"]
            for r in _read_jsonl(self.stage_dir("query") / "responses.jsonl")
        }
        requests = _read_jsonl(self.stage_dir("query") / "requests.jsonl")
        predictions = []
        errors = 0
        for r in requests:
            cell = dict(
                window_id=r["window_id"],
                template_id=r["template_id"],
                backend_id=r["backend_id"],
                attempt_index=r["attempt_index"],
            )
            raw = responses.get((r["window_id"], r["backend_id"], r["template_id"], r["attempt_index"]))
            if raw is None:
                predictions.append(Prediction(value=None, method="failed", **cell))
                continue
            cell_ask = None
            if ask is not None:
                def cell_ask(text, _w=r["window_id"], _a=r["attempt_index"]):
                    return ask(text, _w, _a)
            try:
                p = extract_prediction(
                    raw, ask=cell_ask, plausible_min=cfg.plausible_min, plausible_max=cfg.plausible_max, **cell
                )
            except TransportError as exc:
                logger.warning("secondary extraction failed for %s: %s", cell, exc)
                errors += 1
                p = Prediction(value=None, method="failed", **cell)
            predictions.append(p)
        _write_jsonl(out / "predictions.jsonl", (asdict(p) for p in predictions))
        audit = extraction_audit(predictions)
        _write_json(out / "audit.json", {"config_digest": self.config_digest, "audit": audit})
        return {"predictions": len(predictions), "transport_errors": errors}

    def _stage_ensemble(self, out: Path) -> dict:
        tables = build_ensembles(self.predictions(), self.config.ensemble_weights or None)
        _write_json(out / "ensembles.json", {"config_digest": self.config_digest, **tables_to_dict(tables)})
        return {"repeat_cells": len(tables.repeat)}

    def _stage_baselines(self, out: Path) -> dict:
        cfg = self.config
        preds: dict[str, dict[str, float]] = {}
        if cfg.baselines.enabled:
            windows, split = self.windows()
            cohort = self.cohort()
            train_ids = set(split["train"])
            train = [w for w in windows if w.patient_id in train_ids]
            if len(train) < 2:
                raise ValidationError(f"baselines need >= 2 training windows, got {len(train)}")
            encoder = FeatureEncoder.fit(train)
            x_all = encoder.encode_many(windows, cohort.profiles)
            x_train = encoder.encode_many(train, cohort.profiles)
            y_train = targets(train)
            seed = cfg.seeds["baselines"]

            forest = rf_train(x_train, y_train, cfg.baselines.forest, seed=seed)
            rf_out = forest.predict(x_all)

            length = sequence_length(cfg.initial_width, cohort.median_visit_count)
            seq_all = np.vstack([sequence_input(w, length) for w in windows])
            seq_train = np.vstack([sequence_input(w, length) for w in train])
            cnn = cnn_train(
                seq_train,
                x_train,
                y_train,
                optim=cfg.baselines.cnn_optimizer,
                seed=seed,
                channels=cfg.baselines.cnn_channels,
                kernel=cfg.baselines.cnn_kernel,
            )
            cnn_out = cnn.predict(seq_all, x_all)

            ids = [w.window_id for w in windows]
            rf_name, cnn_name = BASELINE_NAMES
            preds[rf_name] = {wid: float(v) for wid, v in zip(ids, rf_out)}
            preds[cnn_name] = {wid: float(v) for wid, v in zip(ids, cnn_out)}
            models = self.run_dir / "models"
            if models.exists():
                shutil.rmtree(models)
            models.mkdir(parents=True)
            stamp = {"config_digest": self.config_digest}
            _write_json(models / "rf.json", {**forest.to_dict(), **stamp})
            _write_json(models / "cnn.json", {**cnn.to_dict(), **stamp})
            _write_json(models / "encoder.json", {**encoder.to_dict(), **stamp})
        _write_json(out / "predictions.json", {"config_digest": self.config_digest, "predictions": preds})
        return {"baselines": sorted(preds)}

    def _stage_report(self, out: Path) -> dict:
        cfg = self.config
        windows, split = self.windows()
        split_of = {}
        for name in ("train", "validation"):
            members = set(split[name])
            for w in windows:
                if w.patient_id in members:
                    split_of[w.window_id] = name
        actuals = {w.window_id: w.target_visit.egfr for w in windows}
        report = build_report(
            self.ensembles(),
            actuals,
            split_of,
            [b.backend_id for b in cfg.backends],
            list(cfg.templates),
            self.baseline_predictions(),
            significance=cfg.significance,
        )
        paths = write_report(report, out, cfg.decimals)
        _write_json(self.run_dir / "manifest.json", self.manifest(windows, split, paths))
        return {"files": [p.name for p in paths]}

    def manifest(self, windows, split, report_paths) -> dict:
        cohort_meta = _read_json(self.stage_dir("ingest") / "cohort.json")
        requests = _read_jsonl(self.stage_dir("query") / "requests.jsonl")
        audit = _read_json(self.stage_dir("extract") / "audit.json")["audit"]
        cells: dict[str, Counter] = {}
        for r in requests:
            c = cells.setdefault(f"{r['backend_id']}|{r['template_id']}", Counter())
            c["requests"] += 1
            c["transport_errors"] += r["status"] == "error"
        return {
            "config_digest": self.config_digest,
            "pipeline_version": PIPELINE_VERSION,
            "seeds": self.config.seeds,
            "cohort_digest": cohort_meta["cohort_digest"],
            "stage_keys": self.keys,
            "windows": {
                "total": len(windows),
                "train_patients": len(split["train"]),
                "validation_patients": len(split["validation"]),
            },
            "cells": {k: {"requests": c["requests"], "transport_errors": c["transport_errors"]} for k, c in sorted(cells.items())},
            "extraction_audit": audit,
            "report_files": {p.name: _sha256_bytes(p.read_bytes()) for p in report_paths},
        }


# Ensemble table (de)serialisation


def _result_to_dict(r: EnsembleResult) -> dict:
    return {
        "window_id": r.window_id,
        "scope": r.scope,
        "value": r.value,
        "members": [[m.backend_id, m.template_id, m.attempt_index, m.value] for m in r.members],
    }


def _result_from_dict(d: dict) -> EnsembleResult:
    return EnsembleResult(
        window_id=d["window_id"],
        scope=d["scope"],
        members=tuple(Member(b, t, a, v) for b, t, a, v in d["members"]),
        value=d["value"],
    )


def tables_to_dict(tables: EnsembleTables) -> dict:
    return {
        "repeat": [{"key": list(k), **_result_to_dict(r)} for k, r in sorted(tables.repeat.items())],
        "prompt": [{"key": list(k), **_result_to_dict(r)} for k, r in sorted(tables.prompt.items())],
        "model": [{"key": list(k), **_result_to_dict(r)} for k, r in sorted(tables.model.items())],
    }


def tables_from_dict(d: dict) -> EnsembleTables:
    return EnsembleTables(
        repeat={tuple(e["key"]): _result_from_dict(e) for e in d["repeat"]},
        prompt={tuple(e["key"]): _result_from_dict(e) for e in d["prompt"]},
        model={tuple(e["key"]): _result_from_dict(e) for e in d["model"]},
    )
