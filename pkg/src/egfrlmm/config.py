"""Run configuration: YAML parsing with diagnostics anchored to config file lines."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from egfrlmm.backends import DEFAULT_REPEATS, BackendConfig, MockPolicy
from egfrlmm.baselines.cnn import OptimizerConfig
from egfrlmm.baselines.forest import ForestParams
from egfrlmm.chartgen import ChartStyle
from egfrlmm.cohort import DEFAULT_INITIAL_WIDTH
from egfrlmm.errors import ConfigError, EgfrLmmError
from egfrlmm.extraction import PLAUSIBLE_MAX, PLAUSIBLE_MIN
from egfrlmm.prompting import KINDS
from egfrlmm.synthetic import SyntheticSpec

TOP_KEYS = {
    "run_id",
    "output_dir",
    "cache_dir",
    "seeds",
    "cohort",
    "windows",
    "split",
    "repeats",
    "templates",
    "custom_templates",
    "backends",
    "extraction",
    "ensemble",
    "chart",
    "baselines",
    "report",
    "parallelism",
    "lab_visit",
}
SEED_KEYS = ("split", "mocks", "baselines", "synthetic")


class _Lines:
    """Maps key paths in the composed YAML tree to 1-based line numbers."""

    def __init__(self, root: yaml.Node | None):
        self.lines: dict[tuple, int] = {}
        if root is not None:
            self._walk(root, ())

    def _walk(self, node: yaml.Node, path: tuple) -> None:
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                self.lines[path + (key,)] = k.start_mark.line + 1
                self._walk(v, path + (key,))
                self.lines[path + (key,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def __call__(self, *path) -> int | None:
        path = tuple(path)
        while path not in self.lines and path:
            path = path[:-1]
        return self.lines.get(path)


@dataclass(frozen=True)
class CohortSource:
    kind: str  # "synthetic" or "files"
    synthetic: SyntheticSpec | None = None
    visits_path: str = ""
    profiles_path: str = ""


@dataclass(frozen=True)
class CustomTemplate:
    template_id: int
    kind: str
    path: str


@dataclass(frozen=True)
class BaselineConfig:
    enabled: bool = True
    forest: ForestParams = field(default_factory=ForestParams)
    cnn_channels: int = 8
    cnn_kernel: int = 3
    cnn_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass(frozen=True)
class RunConfig:
    seeds: dict[str, int]
    cohort: CohortSource
    backends: tuple[BackendConfig, ...]
    run_id: str = "run"
    output_dir: str = "runs"
    cache_dir: str = ""
    initial_width: int = DEFAULT_INITIAL_WIDTH
    train_fraction: float = 0.7
    repeats: int = DEFAULT_REPEATS
    templates: tuple[int, ...] = (1, 2, 3, 4)
    custom_templates: tuple[CustomTemplate, ...] = ()
    plausible_min: float = PLAUSIBLE_MIN
    plausible_max: float = PLAUSIBLE_MAX
    secondary_backend: str | None = None
    ensemble_weights: dict[str, float] = field(default_factory=dict)
    chart: ChartStyle = field(default_factory=ChartStyle)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    decimals: int = 2
    significance: bool = True
    parallelism: int = 4
    lab_visit: int | None = None
    raw: dict = field(default_factory=dict, compare=False)
    base_dir: str = field(default=".", compare=False)

    @property
    def run_dir(self) -> Path:
        return self.resolve(self.output_dir) / self.run_id

    @property
    def cache_path(self) -> Path:
        return self.resolve(self.cache_dir) if self.cache_dir else self.resolve(self.output_dir) / "cache"

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def backend(self, backend_id: str) -> BackendConfig:
        for b in self.backends:
            if b.backend_id == backend_id:
                return b
        raise KeyError(backend_id)

    def section(self, name: str) -> Any:
        """The raw (normalised) mapping of one config section, for stage hashing."""
        return self.raw.get(name)

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def _type(value, expected, what: str, line) -> Any:
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{what} must be an integer, got {value!r}", line)
    if not isinstance(value, expected):
        name = getattr(expected, "__name__", str(expected))
        raise ConfigError(f"{what} must be of type {name}, got {value!r}", line)
    return value


def _mapping(value, what: str, line) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{what} must be a mapping", line)
    return value


def _no_unknown(data: Mapping, allowed, what: str, lines: _Lines, *path) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {what}; allowed: {sorted(allowed)}", lines(*path, key))


def _wrap(fn, line, *args, **kwargs):
    """Re-raise constructor errors with the line of the section that produced them."""
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        if exc.line is None:
            raise ConfigError(str(exc), line) from exc
        raise
    except (EgfrLmmError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), line) from exc


def _backend(item: Any, index: int, seeds: Mapping[str, int], lines: _Lines) -> BackendConfig:
    where = ("backends", index)
    item = _mapping(item, f"backends[{index}]", lines(*where))
    allowed = {
        "id",
        "kind",
        "policy",
        "sigma",
        "seed",
        "reply",
        "adapter",
        "endpoint",
        "model",
        "credential_env",
        "timeout",
        "max_retries",
        "rate_limit_per_minute",
        "temperature",
        "max_tokens",
        "backoff_base",
    }
    _no_unknown(item, allowed, f"backends[{index}]", lines, *where)
    if "id" not in item:
        raise ConfigError(f"backends[{index}] needs an id", lines(*where))
    kind = item.get("kind", "mock")
    mock = None
    if kind == "mock":
        if "policy" not in item:
            raise ConfigError(f"mock backend {item['id']!r} needs a policy", lines(*where))
        mock = _wrap(
            MockPolicy,
            lines(*where, "policy"),
            kind=item["policy"],
            sigma=float(item.get("sigma", 0.0)),
            seed=int(item.get("seed", seeds["mocks"])),
            reply=str(item.get("reply", "")),
        )
    kwargs = {k: item[k] for k in allowed - {"id", "kind", "policy", "sigma", "seed", "reply"} if k in item}
    return _wrap(BackendConfig, lines(*where), backend_id=str(item["id"]), kind=kind, mock=mock, **kwargs)


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    """Parse and validate YAML config text. Errors carry the offending line."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"malformed YAML: {problem}", line) from exc
    lines = _Lines(root)
    data = _mapping(data, "config", 1)
    _no_unknown(data, TOP_KEYS, "config", lines)

    seeds_raw = data.get("seeds")
    if seeds_raw is None:
        raise ConfigError("seeds section is mandatory (split, mocks, baselines)", 1)
    seeds_raw = _mapping(seeds_raw, "seeds", lines("seeds"))
    _no_unknown(seeds_raw, set(SEED_KEYS), "seeds", lines, "seeds")
    seeds = {}
    for key in ("split", "mocks", "baselines"):
        if key not in seeds_raw:
            raise ConfigError(f"seeds.{key} is mandatory", lines("seeds"))
        seeds[key] = _type(seeds_raw[key], int, f"seeds.{key}", lines("seeds", key))

    cohort_raw = _mapping(data.get("cohort"), "cohort", lines("cohort"))
    if not cohort_raw:
        raise ConfigError("cohort section is mandatory", 1)
    _no_unknown(cohort_raw, {"source", "synthetic", "visits", "profiles"}, "cohort", lines, "cohort")
    source = cohort_raw.get("source", "synthetic")
    if source == "synthetic":
        if "synthetic" not in seeds_raw:
            raise ConfigError("seeds.synthetic is mandatory for a synthetic cohort", lines("seeds"))
        seeds["synthetic"] = _type(seeds_raw["synthetic"], int, "seeds.synthetic", lines("seeds", "synthetic"))
        spec_raw = _mapping(cohort_raw.get("synthetic"), "cohort.synthetic", lines("cohort", "synthetic"))
        spec = _wrap(SyntheticSpec.from_mapping, lines("cohort", "synthetic"), spec_raw)
        cohort = CohortSource("synthetic", synthetic=spec)
    elif source == "files":
        for key in ("visits", "profiles"):
            if not isinstance(cohort_raw.get(key), str):
                raise ConfigError(f"cohort.{key} must name a CSV file", lines("cohort", key))
        cohort = CohortSource("files", visits_path=cohort_raw["visits"], profiles_path=cohort_raw["profiles"])
    else:
        raise ConfigError(f"cohort.source must be 'synthetic' or 'files', got {source!r}", lines("cohort", "source"))

    windows = _mapping(data.get("windows"), "windows", lines("windows"))
    _no_unknown(windows, {"initial_width"}, "windows", lines, "windows")
    initial_width = _type(windows.get("initial_width", DEFAULT_INITIAL_WIDTH), int, "windows.initial_width",
                          lines("windows", "initial_width"))
    if initial_width < 2:
        raise ConfigError("windows.initial_width must be >= 2", lines("windows", "initial_width"))

    split = _mapping(data.get("split"), "split", lines("split"))
    _no_unknown(split, {"train_fraction"}, "split", lines, "split")
    train_fraction = _type(split.get("train_fraction", 0.7), float, "split.train_fraction",
                           lines("split", "train_fraction"))
    if not 0 < train_fraction < 1:
        raise ConfigError("split.train_fraction must be in (0, 1)", lines("split", "train_fraction"))

    repeats = _type(data.get("repeats", DEFAULT_REPEATS), int, "repeats", lines("repeats"))
    if repeats < 1:
        raise ConfigError("repeats must be >= 1", lines("repeats"))

    custom = []
    for i, item in enumerate(data.get("custom_templates") or []):
        item = _mapping(item, f"custom_templates[{i}]", lines("custom_templates", i))
        _no_unknown(item, {"id", "kind", "path"}, f"custom_templates[{i}]", lines, "custom_templates", i)
        tid = _type(item.get("id"), int, f"custom_templates[{i}].id", lines("custom_templates", i, "id"))
        if tid in (1, 2, 3, 4):
            raise ConfigError(f"custom template id {tid} clashes with a built-in", lines("custom_templates", i, "id"))
        if item.get("kind") not in KINDS:
            raise ConfigError(f"custom template kind must be one of {KINDS}", lines("custom_templates", i, "kind"))
        custom.append(CustomTemplate(tid, item["kind"], _type(item.get("path"), str, "path",
                                                             lines("custom_templates", i, "path"))))

    templates_raw = data.get("templates", [1, 2, 3, 4])
    if not isinstance(templates_raw, list) or not templates_raw:
        raise ConfigError("templates must be a non-empty list of template ids", lines("templates"))
    known_ids = {1, 2, 3, 4} | {c.template_id for c in custom}
    templates = []
    for i, t in enumerate(templates_raw):
        t = _type(t, int, f"templates[{i}]", lines("templates", i))
        if t not in known_ids:
            raise ConfigError(f"unknown template id {t}", lines("templates", i))
        if t in templates:
            raise ConfigError(f"template id {t} listed twice", lines("templates", i))
        templates.append(t)

    backends_raw = data.get("backends")
    if not isinstance(backends_raw, list) or not backends_raw:
        raise ConfigError("at least one backend is required", lines("backends") or 1)
    backends = tuple(_backend(item, i, seeds, lines) for i, item in enumerate(backends_raw))
    ids = [b.backend_id for b in backends]
    for i, b in enumerate(ids):
        if ids.index(b) != i:
            raise ConfigError(f"duplicate backend id {b!r}", lines("backends", i))

    extraction = _mapping(data.get("extraction"), "extraction", lines("extraction"))
    _no_unknown(extraction, {"min", "max", "secondary_backend"}, "extraction", lines, "extraction")
    lo = _type(extraction.get("min", PLAUSIBLE_MIN), float, "extraction.min", lines("extraction", "min"))
    hi = _type(extraction.get("max", PLAUSIBLE_MAX), float, "extraction.max", lines("extraction", "max"))
    if not 0 < lo < hi:
        raise ConfigError("extraction range must satisfy 0 < min < max", lines("extraction"))
    secondary = extraction.get("secondary_backend")
    if secondary is not None and secondary not in ids:
        raise ConfigError(f"secondary_backend {secondary!r} is not a configured backend",
                          lines("extraction", "secondary_backend"))

    ens = _mapping(data.get("ensemble"), "ensemble", lines("ensemble"))
    _no_unknown(ens, {"weights"}, "ensemble", lines, "ensemble")
    weights_raw = _mapping(ens.get("weights"), "ensemble.weights", lines("ensemble", "weights"))
    weights = {}
    for b, w in weights_raw.items():
        if b not in ids:
            raise ConfigError(f"ensemble weight for unknown backend {b!r}", lines("ensemble", "weights", b))
        w = _type(w, float, f"ensemble.weights.{b}", lines("ensemble", "weights", b))
        if w < 0:
            raise ConfigError("ensemble weights must be >= 0", lines("ensemble", "weights", b))
        weights[b] = w

    chart = _wrap(ChartStyle.from_mapping, lines("chart"), _mapping(data.get("chart"), "chart", lines("chart")))

    base = _mapping(data.get("baselines"), "baselines", lines("baselines"))
    _no_unknown(base, {"enabled", "forest", "cnn"}, "baselines", lines, "baselines")
    forest_raw = _mapping(base.get("forest"), "baselines.forest", lines("baselines", "forest"))
    forest = _wrap(lambda: ForestParams(**forest_raw), lines("baselines", "forest"))
    cnn_raw = dict(_mapping(base.get("cnn"), "baselines.cnn", lines("baselines", "cnn")))
    _no_unknown(cnn_raw, {"channels", "kernel", "learning_rate", "momentum", "batch_size", "epochs"},
                "baselines.cnn", lines, "baselines", "cnn")
    channels = int(cnn_raw.pop("channels", 8))
    kernel = int(cnn_raw.pop("kernel", 3))
    optim = _wrap(lambda: OptimizerConfig(**cnn_raw), lines("baselines", "cnn"))
    baselines = BaselineConfig(bool(base.get("enabled", True)), forest, channels, kernel, optim)

    report = _mapping(data.get("report"), "report", lines("report"))
    _no_unknown(report, {"decimals", "significance"}, "report", lines, "report")
    decimals = _type(report.get("decimals", 2), int, "report.decimals", lines("report", "decimals"))
    if not 0 <= decimals <= 12:
        raise ConfigError("report.decimals must be in [0, 12]", lines("report", "decimals"))

    parallelism = _type(data.get("parallelism", 4), int, "parallelism", lines("parallelism"))
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1", lines("parallelism"))
    lab_visit = data.get("lab_visit")
    if lab_visit is not None:
        lab_visit = _type(lab_visit, int, "lab_visit", lines("lab_visit"))
        if lab_visit < 1:
            raise ConfigError("lab_visit is a 1-based visit ordinal", lines("lab_visit"))

    run_id = str(data.get("run_id", "run"))
    if not run_id or "/" in run_id or run_id.startswith("."):
        raise ConfigError(f"invalid run_id {run_id!r}", lines("run_id"))

    return RunConfig(
        seeds=seeds,
        cohort=cohort,
        backends=backends,
        run_id=run_id,
        output_dir=str(data.get("output_dir", "runs")),
        cache_dir=str(data.get("cache_dir", "")),
        initial_width=initial_width,
        train_fraction=train_fraction,
        repeats=repeats,
        templates=tuple(templates),
        custom_templates=tuple(custom),
        plausible_min=lo,
        plausible_max=hi,
        secondary_backend=secondary,
        ensemble_weights=weights,
        chart=chart,
        baselines=baselines,
        decimals=decimals,
        significance=bool(report.get("significance", True)),
        parallelism=parallelism,
        lab_visit=lab_visit,
        raw=json.loads(canonical_json(data)),
        base_dir=str(base_dir),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def with_overrides(config: RunConfig, *, seeds: Mapping[str, int] | None = None, run_id: str | None = None) -> RunConfig:
    """Apply CLI overrides by editing the raw mapping and re-validating it."""
    raw = json.loads(canonical_json(config.raw))
    if seeds:
        raw.setdefault("seeds", {}).update(seeds)
    if run_id is not None:
        raw["run_id"] = run_id
    return parse_config(yaml.safe_dump(raw, sort_keys=True), base_dir=config.base_dir)
